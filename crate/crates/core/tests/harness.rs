use damex::harness::checkpoint;
use damex::harness::metrics::mean_purity;
use damex::harness::train::routed_predictions;
use damex::harness::{evaluate, train, ForwardOptions, Mixture, Model, Preset, PresetOptions, RunConfig};
use damex::numeric::Matrix;
use damex::tokens::TokenBatch;
use damex::MappingTable;

const DOMAINS: &str = "
[model]
experts = 2
[train]
steps = 60
seed = 3
optimizer = adam
eval_every = 20
[mapping]
dataset.0.experts = 0
dataset.1.experts = 1
";

fn small_data(cfg: &RunConfig) -> Mixture<f64> {
    let opts = PresetOptions {
        train_per_dataset: 200,
        eval_per_dataset: 100,
        ..cfg.data.options.clone()
    };
    cfg.data.preset.generate(&opts, cfg.data_seed()).unwrap()
}

fn run(cfg: &RunConfig, data: &Mixture<f64>) -> (String, String) {
    let out = train(cfg, data, None).unwrap();
    (out.metrics.to_csv(), checkpoint::to_text(&out.model, cfg))
}

#[test]
fn training_is_deterministic_serial_and_parallel() {
    let mut cfg = RunConfig::parse(DOMAINS).unwrap();
    let data = small_data(&cfg);
    let first = run(&cfg, &data);
    assert_eq!(run(&cfg, &data), first);
    cfg.train.parallel_experts = true;
    let parallel = run(&cfg, &data);
    assert_eq!(parallel.0, first.0);
    // the resolved config records the flag; parameters must still agree
    let strip = |s: &str| s.lines().filter(|l| !l.contains("parallel_experts")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&parallel.1), strip(&first.1));
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let cfg = RunConfig::parse(DOMAINS).unwrap();
    let data = small_data(&cfg);
    let out = train(&cfg, &data, None).unwrap();
    let (back, _) = checkpoint::from_text::<f64>(&checkpoint::to_text(&out.model, &cfg)).unwrap();
    let opts = ForwardOptions::inference();
    for start in (0..data.eval.len()).step_by(64).take(10) {
        let idx: Vec<usize> = (start..(start + 64).min(data.eval.len())).collect();
        let batch = data.eval.select(&idx);
        let a = out.model.forward(&batch, &opts).unwrap().logits;
        let b = back.forward(&batch, &opts).unwrap().logits;
        assert_eq!(a.as_slice(), b.as_slice());
    }
}

#[test]
fn single_expert_equals_dense_model() {
    let mut cfg = RunConfig::parse("model.experts = 1\nloss.aux_weight = 0").unwrap();
    cfg.model.routing.capacity_factor = 1.0;
    let moe = Model::<f64>::new(cfg.model.clone(), 4).unwrap();
    let mut dense_cfg = cfg.model.clone();
    dense_cfg.moe = false;
    let mut dense = Model::<f64>::new(dense_cfg, 99).unwrap();
    let moe_params: Vec<(String, Matrix<f64>)> =
        moe.param_names().into_iter().zip(moe.params().into_iter().cloned()).collect();
    let values: Vec<Matrix<f64>> = dense
        .param_names()
        .iter()
        .map(|name| {
            let wanted = name.replace(".ffn.", ".expert0.");
            let key = if moe_params.iter().any(|(n, _)| *n == wanted) { wanted } else { name.clone() };
            moe_params.iter().find(|(n, _)| *n == key).unwrap().1.clone()
        })
        .collect();
    dense.set_params(values).unwrap();
    let data = small_data(&cfg);
    let opts = ForwardOptions::inference();
    let a = moe.forward(&data.eval, &opts).unwrap();
    let b = dense.forward(&data.eval, &opts).unwrap();
    assert!(a.layers.iter().all(|l| (0..l.plan.num_tokens()).all(|t| !l.plan.is_dropped(t))));
    assert_eq!(a.logits.as_slice(), b.logits.as_slice());
}

#[test]
fn zero_output_layers_reduce_to_the_head() {
    let cfg = RunConfig::parse("model.experts = 2\nloss.aux_weight = 0").unwrap();
    let mut model = Model::<f64>::new(cfg.model.clone(), 1).unwrap();
    let names = model.param_names();
    for (name, p) in names.iter().zip(model.params_mut()) {
        if name.ends_with(".w2") || name.ends_with(".b2") {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
    }
    let data = small_data(&cfg);
    let logits = model.forward(&data.eval, &ForwardOptions::inference()).unwrap().logits;
    for t in 0..data.eval.len() {
        for c in 0..cfg.model.classes {
            let mut expect = model.head_b[(0, c)];
            for (x, w) in data.eval.features.row(t).iter().zip(model.head_w.row(c)) {
                expect += x * w;
            }
            assert!((logits[(t, c)] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn task_loss_decreases_without_auxiliary_terms() {
    let mut cfg = RunConfig::parse("model.experts = 1\nloss.aux_weight = 0\ntrain.steps = 200").unwrap();
    cfg.train.seed = 5;
    let data = small_data(&cfg);
    let out = train(&cfg, &data, None).unwrap();
    let mean = |r: std::ops::Range<usize>| {
        out.metrics.steps[r.clone()].iter().map(|(_, b)| b.task).sum::<f64>() / r.len() as f64
    };
    let (early, late) = (mean(0..20), mean(180..200));
    assert!(late < 0.5 * early, "task loss {early} -> {late}");
}

#[test]
fn untrained_purity_is_chance_level() {
    // averaged over random routers, a token lands on its mapped expert with
    // probability 1/E
    for experts in [2usize, 4] {
        let mut cfg = RunConfig::parse(&format!("model.experts = {experts}\nloss.aux_weight = 0")).unwrap();
        cfg.model.router_init = 1.0;
        let data = small_data(&cfg);
        let mapping = MappingTable::new(experts, [(0, vec![0]), (1, vec![1])]).unwrap();
        let seeds = 60;
        let mut total = 0.0;
        for seed in 0..seeds {
            let model = Model::<f64>::new(cfg.model.clone(), seed).unwrap();
            let report = evaluate(&model, &data.eval, Some(&mapping), 64).unwrap();
            let p = mean_purity(&report.purity);
            total += p.iter().sum::<f64>() / p.len() as f64;
        }
        let mean = total / seeds as f64;
        let chance = 1.0 / experts as f64;
        assert!((mean - chance).abs() < 0.12, "E={experts}: mean purity {mean}");
    }
}

#[test]
fn metrics_are_bounded_and_rows_normalized() {
    for preset in [Preset::Domains, Preset::Divergent, Preset::Limited] {
        let mut cfg = RunConfig::parse("model.experts = 3\nloss.aux_mode = load_balancing\ntrain.steps = 30").unwrap();
        cfg.data.preset = preset;
        cfg.model.classes = preset.num_classes();
        let data = small_data(&cfg);
        let out = train(&cfg, &data, None).unwrap();
        let mapping = MappingTable::round_robin(&data.eval.datasets(), 3).unwrap();
        let report = evaluate(&out.model, &data.eval, Some(&mapping), 64).unwrap();
        for layer in &report.purity {
            assert!(layer.values().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(report.collapse.iter().all(|c| (0.0..=1.0).contains(c)));
        for u in &report.utilization {
            for row in u.rows.iter().flatten() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn absent_dataset_rows_are_flagged() {
    let cfg = RunConfig::parse("model.experts = 2\nloss.aux_weight = 0").unwrap();
    let data = small_data(&cfg);
    let only0: Vec<usize> = (0..data.eval.len()).filter(|&i| data.eval.dataset_ids[i] == 0).collect();
    let batch: TokenBatch<f64> = data.eval.select(&only0);
    let model = Model::<f64>::new(cfg.model.clone(), 0).unwrap();
    let (_, traces) = routed_predictions(&model, &batch, 64).unwrap();
    let u = damex::harness::utilization_matrix(&traces, &batch.dataset_ids, &[0, 1], &batch.foreground).unwrap();
    for layer in u {
        assert!(layer.rows[0].is_some());
        assert!(layer.rows[1].is_none());
    }
}

#[test]
fn presets_follow_options() {
    let opts = PresetOptions {
        shots: 100,
        ..PresetOptions::default()
    };
    let mix = Preset::Limited.generate::<f64>(&opts, 0).unwrap();
    let minority = (0..mix.train.len())
        .filter(|&i| mix.train.dataset_ids[i] == 1 && mix.train.foreground[i])
        .count();
    assert_eq!(minority, 100);
}
