//! Placeholder CLI entry; filled in once the core crate is complete.

pub fn run() -> i32 {
    eprintln!("error: 2: not yet implemented");
    2
}
