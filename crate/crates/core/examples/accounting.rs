//! Parameter and compute totals of the toy and ConvNeXt-T models at 512x512.

use fflab::analysis::count_params_flops;
use fflab::model::ModelConfig;
use fflab::Result;

fn main() -> Result<()> {
    let toy = count_params_flops(&ModelConfig::toy(), [1, 1, 512, 512])?;
    let big = count_params_flops(&ModelConfig::convnext_tiny(), [1, 3, 512, 512])?;
    print!("{}", toy.to_text());
    println!();
    for prefix in ["backbone", "ftm", "fusion", "head"] {
        let (params, macs) = big.subtotal(prefix);
        println!("{prefix:<10} {:>8.2}M params {:>7.2}G MACs", params as f64 / 1e6, macs as f64 / 1e9);
    }
    println!(
        "ConvNeXt-T total: {:.2}M params, {:.2}G MACs, {:.2}G FLOPs",
        big.total_params as f64 / 1e6,
        big.total_macs as f64 / 1e9,
        big.total_flops as f64 / 1e9
    );
    Ok(())
}
