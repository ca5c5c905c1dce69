//! `dmi` binary: thin shim over the library's command dispatcher.

fn main() {
    std::process::exit(dmi_core::cli::run());
}
