use shuttlesim::cli;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        print!("{}", cli::USAGE);
        std::process::exit(if args.is_empty() { cli::EXIT_VALIDATION } else { 0 });
    }
    let opts = match cli::parse_args(&args) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("{msg}");
            std::process::exit(cli::EXIT_VALIDATION);
        }
    };
    std::process::exit(cli::run(&opts));
}
