// Scratch harness: compare ERM vs Okapi over paired seeds on candidate configs.
use okapi::matcher::CaliperParams;
use okapi::toy::{gen_synth, train_erm, train_okapi, SynthConfig, TrainConfig};

fn run(name: &str, synth: &SynthConfig, cfg: &TrainConfig, seeds: u64) {
    let (mut erm_ood, mut ok_ood, mut erm_id, mut ok_id, mut ret) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut wins = 0u64;
    let mut worst: f64 = 1.0;
    for seed in 0..seeds {
        let data = gen_synth(&SynthConfig { seed, ..synth.clone() }).unwrap();
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let e = train_erm(&data, &cfg).unwrap();
        let o = train_okapi(&data, &cfg).unwrap();
        let el = e.history.last().unwrap();
        let ol = o.history.last().unwrap();
        erm_ood += el.ood_acc; ok_ood += ol.ood_acc;
        erm_id += el.id_acc; ok_id += ol.id_acc;
        ret += o.match_stats.matched_queries as f64 / o.match_stats.total_queries.max(1) as f64;
        if ol.ood_acc >= el.ood_acc { wins += 1; }
        worst = worst.min(ol.ood_acc - el.ood_acc);
    }
    let n = seeds as f64;
    println!("{name}: ERM id={:.3} ood={:.3} | OK id={:.3} ood={:.3} | delta={:+.3} wins={wins}/{seeds} worst={:+.3} ret={:.2}",
        erm_id/n, erm_ood/n, ok_id/n, ok_ood/n, (ok_ood-erm_ood)/n, worst, ret/n);
}

fn main() {
    let base = SynthConfig::default();
    for lam in [1.0, 2.0] {
        for warm in [0.1, 0.2] {
            for lr in [0.05, 0.1] {
                let cfg = TrainConfig {
                    lambda_final: lam,
                    lambda_warmup_fraction: warm,
                    lr,
                    caliper: CaliperParams { t_fixed: 0.05, t_std: f64::INFINITY, tau: 2.0 },
                    ..TrainConfig::default()
                };
                run(&format!("lam{lam} warm{warm} lr{lr}"), &base, &cfg, 10);
            }
        }
    }
}
