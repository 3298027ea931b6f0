fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(fanout_core::pipeline::worker::worker_main(&args));
}
