use std::io::Write;

fn main() {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = pixelsnail::cli::run(std::env::args_os(), &mut out) {
        let _ = out.flush();
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
