// SPDX-License-Identifier: Apache-2.0

use clap::Parser;

fn main() {
    let args = bocpdms::cli::Args::parse();
    std::process::exit(bocpdms::cli::main_with_args(args));
}
