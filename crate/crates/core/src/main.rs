fn main() {
    std::process::exit(usrender::cli::run());
}
