// Scratch driver for pipeline sizing (temporary).

use std::time::Instant;

use lethe::pipeline::{ExperimentConfig, Pipeline};
use lethe::unlearn::UnlearnMode;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = std::path::PathBuf::from("/tmp/lethe-probe");
    let _ = std::fs::remove_dir_all(&cfg.output_dir);

    let mut p = Pipeline::open(cfg).unwrap();
    let t0 = Instant::now();
    let o = p.stage_inject(false).unwrap();
    println!("inject: {:.1}s", o.elapsed_secs);
    let o = p.stage_train(false).unwrap();
    println!("train: {:.1}s (total {:.1}s)", o.elapsed_secs, t0.elapsed().as_secs_f64());

    let o = p.stage_eval(None, false).unwrap();
    println!("eval(base): {:.1}s", o.elapsed_secs);
    let base = p.load_report("base").unwrap();
    println!(
        "base: ERR {:.3} FRS {:.3} S-Exp {:.3} E-Hit {:?} PPL {:?}",
        base.err, base.frs, base.s_exp, base.e_hit, base.utility
    );

    let o = p.stage_unlearn(UnlearnMode::Oracle, false).unwrap();
    println!("unlearn oracle: {:.1}s", o.elapsed_secs);
    let o = p.stage_eval(Some(UnlearnMode::Oracle), false).unwrap();
    println!("eval(oracle): {:.1}s", o.elapsed_secs);
    let r = p.load_report("oracle").unwrap();
    println!(
        "oracle: ERR {:.3} FRS {:.3} S-Exp {:.3} E-Hit {:?} PPL {:?}",
        r.err, r.frs, r.s_exp, r.e_hit, r.utility
    );

    let o = p.stage_invert_train(false).unwrap();
    println!("invert-train: {:.1}s", o.elapsed_secs);
    let inv_report = p.load_inverter_report().unwrap();
    println!(
        "inverter: final CE {:?} holdout CE {:?} ceiling {:.3}",
        inv_report.epoch_ce.last(),
        inv_report.holdout_ce,
        inv_report.uniform_ceiling
    );
    let q = p.inverter_quality_probe(60).unwrap();
    println!("inverter quality: F1 {:.3} BLEU {:.3}", q.token_f1, q.bleu);

    let o = p.stage_synthesize(false).unwrap();
    println!("synthesize: {:.1}s", o.elapsed_secs);
    let o = p.stage_annotate(false).unwrap();
    println!("annotate: {:.1}s", o.elapsed_secs);
    let pseudo = p.load_pseudo_samples().unwrap();
    println!("pseudo samples kept: {}", pseudo.len());
    for s in pseudo.iter().take(4) {
        let masked: usize = s.mask.iter().map(|&m| m as usize).sum();
        println!("  [{} masked] {}", masked, &s.text.chars().take(90).collect::<String>());
    }

    let o = p.stage_unlearn(UnlearnMode::Pseudo, false).unwrap();
    println!("unlearn pseudo: {:.1}s", o.elapsed_secs);
    let o = p.stage_eval(Some(UnlearnMode::Pseudo), false).unwrap();
    println!("eval(pseudo): {:.1}s", o.elapsed_secs);
    let r = p.load_report("pseudo").unwrap();
    println!(
        "pseudo: ERR {:.3} FRS {:.3} S-Exp {:.3} E-Hit {:?} PPL {:?}",
        r.err, r.frs, r.s_exp, r.e_hit, r.utility
    );

    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
