//! In-memory modality ablation on simulated episodes.
//!
//! usage: cargo run --release -p slipnap-core --example reproduce -- [n_per_cell] [epochs] [seed]
//!
//! Prints the comparison table, then for each detector and condition the
//! AUROC of each post-drop tick offset against all normal ticks.

use std::time::Instant;

use slipnap_core::fusion::ModalityMask;
use slipnap_core::metrics::{auroc, ComparisonTable};
use slipnap_core::pipeline::{condition_reports, score_split, train_detector, FeatureSet, PipelineConfig};
use slipnap_core::simulator::{generate_dataset, Split};
use slipnap_core::streamsync::{Condition, Label};

fn main() -> slipnap_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let mut cfg = PipelineConfig::default().with_seed(arg(2, 0));
    cfg.simulator.n_per_cell = arg(0, 6) as usize;
    cfg.train.epochs = arg(1, 200) as usize;

    let start = Instant::now();
    let manifest = generate_dataset(&cfg.simulator_config())?;
    let data = FeatureSet::simulate(&cfg, &manifest)?;
    eprintln!("{} episodes featurized in {:.1?}", data.entries.len(), start.elapsed());

    let mut table = ComparisonTable::new(Condition::ALL.to_vec());
    let mut detail = String::new();
    for mask in ModalityMask::ablation_rows() {
        let t0 = Instant::now();
        let bundle = train_detector(&cfg, &data, mask)?.bundle;
        let log = &bundle.train_log;
        eprintln!(
            "{mask}: best epoch {} of {}, val mse {:.3e} -> {:.3e}, kept rank {}, {:.1?}",
            log.best_epoch,
            log.epochs.len(),
            log.initial_val_loss,
            log.best_val_loss,
            bundle.nap.kept_rank(),
            t0.elapsed()
        );
        let scored = score_split(&bundle, &data, Split::Eval, mask)?;
        table.push_row(mask.display_name(), &condition_reports(&scored, bundle.threshold(), &cfg)?);
        for c in Condition::ALL {
            let normal: Vec<f64> = scored
                .iter()
                .filter(|s| s.condition == c && s.label == Label::Normal)
                .map(|s| s.score)
                .collect();
            detail.push_str(&format!("{:<14}{:<9}", mask.display_name(), c.name()));
            for k in 1..=5 {
                let t = 5.0 + k as f64 / 10.0;
                let mut scores = normal.clone();
                let mut labels = vec![Label::Normal; normal.len()];
                for s in scored.iter().filter(|s| {
                    s.condition == c && s.label == Label::Abnormal && (s.tick_time - t).abs() < 1e-6
                }) {
                    scores.push(s.score);
                    labels.push(Label::Abnormal);
                }
                detail.push_str(&format!(" {:.3}", auroc(&scores, &labels)?));
            }
            detail.push('\n');
        }
    }
    println!("{table}");
    println!("per-offset AUROC (+0.1 .. +0.5 s)\n{detail}");
    eprintln!("total {:.1?}", start.elapsed());
    Ok(())
}
