//! MMD to the banana target at iteration 300 and 10000 for the four samplers,
//! fig3 preset, five seeds.

use fghflow::samplers::Method;
use fghflow::validation::fig3_run;

fn main() -> Result<(), fghflow::Error> {
    println!("seed method      mmd@300  mmd@10000 baseline");
    for seed in 0..5 {
        for m in Method::ALL {
            let r = fig3_run(m, seed)?;
            println!(
                "{seed:<4} {:<11} {:.4}   {:.4}    {:.4}",
                m.as_str(),
                r.mmd_early,
                r.mmd_final,
                r.baseline
            );
        }
    }
    Ok(())
}
