// Training allocates large per-step buffers; mimalloc reuses them instead of
// faulting fresh pages in every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(neural_cbct::cli::main_with_args(std::env::args_os()));
}
