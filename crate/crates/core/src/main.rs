use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

fn main() {
    let interrupt = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&interrupt);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }
    std::process::exit(modsep::cli::run(std::env::args_os(), interrupt));
}
