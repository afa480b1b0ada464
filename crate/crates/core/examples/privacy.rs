//! Privacy filter and knowledge-base projection on the eye factors.
//!
//! `cargo run --release --example privacy`

use latentlink::generator::LatentCode;
use latentlink::nn::Rng;
use latentlink::privacy::{build_kb, filter_threshold, protect, PrivacyConfig};
use latentlink::scene::{sample_factors, SceneSpec};

fn main() -> latentlink::Result<()> {
    let spec = SceneSpec::default();
    let mut rng = Rng::new(11);
    let pool: Vec<LatentCode> = (0..500).map(|_| LatentCode(sample_factors(&mut rng, &spec).0)).collect();
    let kb = build_kb(&pool)?;
    let cfg = PrivacyConfig::default();
    cfg.validate(&spec)?;
    let eyes = spec.segment_range("eyes").unwrap();

    for trial in 0..5 {
        let l = LatentCode(sample_factors(&mut rng, &spec).0);
        let (filtered, projected) = protect(&l, &kb, &spec, &cfg, &mut rng)?;
        let part = |c: &LatentCode| c.0[eyes.clone()].to_vec();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        println!(
            "trial {trial}: threshold {:.3}, filter moved {:.3}, projection is {:.3} from mean / {:.3} from filtered, original eyes moved {:.3}",
            filter_threshold(&part(&l), cfg.lambda1),
            d(&part(&filtered), &part(&l)),
            d(&part(&projected), &part(&kb.mean)),
            d(&part(&projected), &part(&filtered)),
            d(&part(&projected), &part(&l)),
        );
        assert_eq!(projected.0[..eyes.start], l.0[..eyes.start]);
    }
    Ok(())
}
