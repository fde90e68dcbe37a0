use clap::Parser;

fn main() {
    let cli = match asd_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = asd_cli::run(&cli, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(asd_cli::exit_code(&e));
    }
}
