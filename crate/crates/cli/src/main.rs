use posegraph_cli::{parse_args, run, USAGE};

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" || argv[0] == "help" {
        print!("{USAGE}");
        std::process::exit(if argv.is_empty() { 1 } else { 0 });
    }
    match parse_args(&argv) {
        Ok(args) => std::process::exit(run(&args)),
        Err(e) => {
            eprintln!("error: {e}\n{USAGE}");
            std::process::exit(1);
        }
    }
}
