use std::process::Command;

fn git(args: &[&str]) -> Option<String> {
    let out = Command::new("git").args(args).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let version = git(&["describe", "--tags", "--dirty", "--match", "v*"]).or_else(|| {
        let hash = git(&["rev-parse", "--short", "HEAD"])?;
        let dirty = git(&["status", "--porcelain", "--untracked-files=no"]).map_or("", |_| "-dirty");
        Some(format!("v{}-g{hash}{dirty}", env!("CARGO_PKG_VERSION")))
    });
    if let Some(v) = version {
        println!("cargo:rustc-env=FBSEE_GIT_DESCRIBE={v}");
    }
}
