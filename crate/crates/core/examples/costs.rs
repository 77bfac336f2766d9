//! Prints stored parameters and multiply-accumulates for every preset at
//! 224 x 224, before and after fusion.

use ravit::backbone::{build_variant, count_params_flops, fuse_model, VariantConfig, PRESETS};

fn main() -> ravit::Result<()> {
    println!("{:<9} {:>10} {:>10} {:>9} {:>9}", "preset", "params M", "fused M", "GMACs", "GFLOPs");
    for name in PRESETS {
        let model = build_variant(&VariantConfig::preset(name)?, 0)?;
        let cost = count_params_flops(&model, 224, 224);
        let fused = count_params_flops(&fuse_model(&model)?, 224, 224);
        println!(
            "{name:<9} {:>10.3} {:>10.3} {:>9.3} {:>9.3}",
            cost.params as f64 / 1e6,
            fused.params as f64 / 1e6,
            cost.macs as f64 / 1e9,
            cost.flops as f64 / 1e9
        );
    }
    Ok(())
}
