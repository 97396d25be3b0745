use continuousp::cli;

fn main() {
    std::process::exit(cli::run());
}
