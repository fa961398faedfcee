use anyhow::Result;
use clap::Args as ClapArgs;
use headforge_core::cluster::adjusted_rand_index;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// First label file, one integer per line.
    #[arg(long)]
    a: PathBuf,
    /// Second label file, one integer per line.
    #[arg(long)]
    b: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let a = crate::cmd::read_labels(&args.a)?;
    let b = crate::cmd::read_labels(&args.b)?;
    let ari = adjusted_rand_index(&a, &b)?;
    println!("{ari:.6}");
    Ok(())
}
