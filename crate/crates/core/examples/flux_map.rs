//! Build a flux map from a catalog and score a perturbed prediction with it.

use starflux::{build_flux_map, flux_consistency_loss, generate, normalize_map, SynthSpec};

fn main() -> starflux::Result<()> {
    let (gt, truth) = generate(&SynthSpec {
        width: 128,
        height: 128,
        n_sources: 10,
        ..SynthSpec::default()
    })?;
    let map = build_flux_map(gt.dims(), &truth, 1.0)?;
    println!("map peak {:.2}, total {:.1}", map.max(), map.sum());
    let dimmed: Vec<f32> = gt.data().iter().map(|v| v * 0.9).collect();
    let pred = gt.with_data(dimmed)?;
    for (name, m) in [("raw", map.clone()), ("normalized", normalize_map(&map)?)] {
        let loss = flux_consistency_loss(&pred, &gt, &m)?;
        println!(
            "{name:>10}: l_recon {:.4} l_flux {:.4} total {:.4}",
            loss.l_recon,
            loss.l_flux,
            loss.total(0.01)
        );
    }
    Ok(())
}
