use std::io;

fn main() {
    qps::cli::init_thread_pool();
    let code = qps::cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
