use coral_core::catalog::{generate_catalog, refine_attributes, CatalogConfig};
use coral_core::encoder::{EncoderConfig, InputMode};
use coral_core::eval::{chance_r_at_1, evaluate};
use coral_core::rng::{seeded, Stream};
use coral_core::sampler::{compose_query_set, split_train_test, SamplerConfig, Strata};
use coral_core::trainer::{train, AblationPreset, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(640);
    let n_test: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let t0 = Instant::now();
    let cat_cfg = CatalogConfig::default();
    let catalog = refine_attributes(&generate_catalog(&cat_cfg, 1).unwrap());
    println!("catalog: {} products in {:?}", catalog.products.len(), t0.elapsed());

    let t0 = Instant::now();
    let scfg = SamplerConfig { seed: 1, ..SamplerConfig::default() };
    let mut rng = seeded(1, Stream::Sampler);
    let qs = compose_query_set(&catalog, &scfg, n_train + n_test, &mut rng).unwrap();
    println!("queries: {} in {:?}", qs.queries.len(), t0.elapsed());
    let mut counts = [0usize; 3];
    let mut pos_sizes = 0usize;
    for q in &qs.queries {
        counts[q.conditions.len() - 2] += 1;
        pos_sizes += q.positives.len();
    }
    println!("condition counts 2/3/4: {:?} mean positives {:.1}",
        counts.iter().map(|c| *c as f64 / qs.queries.len() as f64).collect::<Vec<_>>(),
        pos_sizes as f64 / qs.queries.len() as f64);

    let mut srng = seeded(2, Stream::Other);
    let (train_q, test_q) = split_train_test(&qs.queries, n_test as f64 / (n_train + n_test) as f64, Strata::LanguageAndCategory, &mut srng).unwrap();
    println!("train {} test {}", train_q.len(), test_q.len());

    let enc = EncoderConfig::default();
    for preset in [AblationPreset::Cl, AblationPreset::Coral] {
        let cfg = TrainConfig { lr, preset, epochs, seed: 11, ..TrainConfig::default() };
        let t0 = Instant::now();
        let out = train(&catalog, &train_q, &enc, &cfg).unwrap();
        let train_time = t0.elapsed();
        let first = &out.steps[0].loss;
        let last = &out.steps[out.steps.len() - 1].loss;
        let t1 = Instant::now();
        let report = evaluate(&out.checkpoint.params, &catalog, &test_q, InputMode::Seq, "c", "k").unwrap();
        let m = report.splits["overall"].metrics.unwrap();
        println!("preset {:?}: steps {} train {:?} eval {:?} | loss {:.4}->{:.4} | R@1 {:.4} R@5 {:.4} R@10 {:.4} MRR {:.4}",
            preset, out.steps.len(), train_time, t1.elapsed(), first.total, last.total, m.r_at_1, m.r_at_5, m.r_at_10, m.mrr);
    }
    println!("chance R@1: {:.5}", chance_r_at_1(&test_q, catalog.products.len()));

    // feature-similarity oracle: rank pool by cosine to the mean condition feature
    let mut hits1 = 0.0;
    let mut hits10 = 0.0;
    let mut mrr = 0.0;
    for q in &test_q {
        let feats: Vec<Vec<f64>> = q.conditions.iter()
            .map(|c| catalog.product(&c.product_id).unwrap().mean_feature())
            .collect();
        let d = feats[0].len();
        let mut mean = vec![0.0; d];
        for f in &feats { for (m, x) in mean.iter_mut().zip(f) { *m += x; } }
        let cond_ids: std::collections::BTreeSet<_> = q.conditions.iter().map(|c| c.product_id.clone()).collect();
        let mut scored: Vec<(&coral_core::catalog::ProductId, f64)> = catalog.products.iter()
            .filter(|p| !cond_ids.contains(&p.id))
            .map(|p| {
                let f = p.mean_feature();
                let dot: f64 = f.iter().zip(&mean).map(|(a, b)| a * b).sum();
                let nf: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                (&p.id, dot / nf.max(1e-9))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        let pos: std::collections::BTreeSet<_> = q.positives.iter().cloned().collect();
        let mut first = None;
        for (i, (id, _)) in scored.iter().enumerate() {
            if pos.contains(id) { first = Some(i + 1); break; }
        }
        if let Some(r) = first {
            if r <= 1 { hits1 += 1.0; }
            if r <= 10 { hits10 += 1.0; }
            mrr += 1.0 / r as f64;
        }
    }
    let n = test_q.len() as f64;
    println!("feature oracle: R@1 {:.4} R@10 {:.4} MRR {:.4}", hits1 / n, hits10 / n, mrr / n);
}
