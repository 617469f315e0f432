//! Experiment runner: one table row per method, ordered by access shade as
//! in the comparison tables, plus the ablation grids.

use std::sync::Arc;

use super::{
    generate_dataset, pretrain_vault, unique_pairs, DomainShift, HarnessError, SyntheticPair,
};
use crate::adapters::{AblationMask, AdapterConfig, LayerSelection};
use crate::train::{
    evaluate_classification, evaluate_retrieval, eval_features, train_graybox, train_whitebox,
    whitebox_eval_features, Method, MetricRecord, TrainConfig,
};
use crate::vault::{InProcessClient, Mode, VaultModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Text-to-image retrieval, reporting R@1/5/10 on the collapsed test
    /// pairs.
    Retrieval,
    /// Zero-shot-style classification against the 32 class prompts,
    /// reporting top-1/top-5 accuracy.
    Classification,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub task: Task,
    pub shift: DomainShift,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub vault_seed: u64,
    /// Methods with their train configs, any order; rows come out in shade
    /// order.
    pub methods: Vec<TrainConfig>,
}

impl ExperimentSpec {
    /// Desk-scale defaults for the constructed-recovery task.
    pub fn affine_recovery(vault_seed: u64, data_seed: u64, methods: Vec<TrainConfig>) -> Self {
        ExperimentSpec {
            name: "affine-pixel-shift".into(),
            task: Task::Retrieval,
            shift: DomainShift::affine(data_seed ^ 0x51F7),
            n_train: 2048,
            n_test: 512,
            data_seed,
            vault_seed,
            methods,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRow {
    pub method: String,
    pub shade: &'static str,
    pub metrics: Vec<(String, f64)>,
    pub failed: Option<String>,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub spec_name: String,
    pub rows: Vec<MethodRow>,
    pub histories: Vec<(String, Vec<MetricRecord>)>,
}

impl ExperimentResult {
    pub fn get(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn metric(&self, method: &str, metric: &str) -> Option<f64> {
        self.get(method)?
            .metrics
            .iter()
            .find(|(m, _)| m == metric)
            .map(|(_, v)| *v)
    }

    /// Deterministic fixed-precision text table.
    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.spec_name);
        let metric_names: Vec<String> = self
            .rows
            .iter()
            .find(|r| r.failed.is_none())
            .map(|r| r.metrics.iter().map(|(m, _)| m.clone()).collect())
            .unwrap_or_default();
        out.push_str(&format!("{:<10} {:<10}", "method", "shade"));
        for m in &metric_names {
            out.push_str(&format!(" {m:>8}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<10} {:<10}", row.method, row.shade));
            match &row.failed {
                Some(reason) => out.push_str(&format!(" FAILED: {reason}")),
                None => {
                    for (_, v) in &row.metrics {
                        out.push_str(&format!(" {v:>8.4}"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn shade_rank(shade: &str) -> usize {
    match shade {
        "white" => 0,
        "lightgray" => 1,
        "darkgray" => 2,
        _ => 3,
    }
}

fn task_metrics(
    task: Task,
    img: &crate::tensor::Tensor<f32>,
    txt: &crate::tensor::Tensor<f32>,
    eval_pairs: &[SyntheticPair],
    class_feats: Option<&crate::tensor::Tensor<f32>>,
) -> Vec<(String, f64)> {
    match task {
        Task::Retrieval => evaluate_retrieval(txt, img, &[1, 5, 10])
            .into_iter()
            .map(|(k, v)| (format!("r@{k}"), v))
            .collect(),
        Task::Classification => {
            let labels: Vec<usize> = eval_pairs.iter().map(|p| p.class_id).collect();
            let (top1, top5) =
                evaluate_classification(img, class_feats.expect("class prompts"), &labels);
            let mut out = vec![("top1".to_string(), top1)];
            if let Some(v) = top5 {
                out.push(("top5".to_string(), v));
            }
            out
        }
    }
}

/// Runs every method of the spec against one pretrained vault and assembles
/// the shade-ordered table. A failing method marks its row and leaves the
/// rest standing.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, HarnessError> {
    let pretrained = pretrain_vault(spec.vault_seed, &super::default_cache_dir())?;
    let vault = Arc::new(pretrained.vault);
    let data = generate_dataset(spec.n_train, spec.n_test, spec.shift, spec.data_seed);
    let eval_pairs = unique_pairs(&data.test);

    let mut ordered: Vec<&TrainConfig> = spec.methods.iter().collect();
    ordered.sort_by_key(|c| (shade_rank(c.method.shade()), c.method.name()));

    let mut rows = Vec::new();
    let mut histories = Vec::new();
    for config in ordered {
        let method = config.method.name();
        let run = run_method(&vault, spec, config, &data.train, &eval_pairs);
        match run {
            Ok((metrics, history)) => {
                rows.push(MethodRow {
                    method: method.clone(),
                    shade: config.method.shade(),
                    metrics,
                    failed: None,
                });
                histories.push((method, history));
            }
            Err(e) => rows.push(MethodRow {
                method,
                shade: config.method.shade(),
                metrics: vec![],
                failed: Some(e.to_string()),
            }),
        }
    }

    Ok(ExperimentResult {
        spec_name: spec.name.clone(),
        rows,
        histories,
    })
}

type MethodOutput = (Vec<(String, f64)>, Vec<MetricRecord>);

fn run_method(
    vault: &Arc<VaultModel<f32>>,
    spec: &ExperimentSpec,
    config: &TrainConfig,
    train: &[SyntheticPair],
    eval_pairs: &[SyntheticPair],
) -> Result<MethodOutput, HarnessError> {
    let class_prompts: Vec<SyntheticPair> = (0..super::N_CLASSES)
        .map(|class| SyntheticPair {
            image: eval_pairs[0].image.clone(), // placeholder image, text side only
            caption: super::caption_for(class),
            class_id: class,
        })
        .collect();

    match config.method {
        Method::Zs => {
            let (img, txt) = whitebox_eval_features(vault, Mode::Sealed, eval_pairs)?;
            let class_feats = match spec.task {
                Task::Classification => Some(
                    whitebox_eval_features(vault, Mode::Sealed, &class_prompts)?.1,
                ),
                Task::Retrieval => None,
            };
            Ok((
                task_metrics(spec.task, &img, &txt, eval_pairs, class_feats.as_ref()),
                vec![],
            ))
        }
        Method::Lp | Method::Dga | Method::Lga => {
            let mut client = InProcessClient::new(Arc::clone(vault));
            let outcome = train_graybox(&mut client, train, eval_pairs, config)?;
            let (img, txt) = eval_features(&mut client, &outcome.adapters, eval_pairs, 64)?;
            let class_feats = match spec.task {
                Task::Classification => {
                    Some(eval_features(&mut client, &outcome.adapters, &class_prompts, 64)?.1)
                }
                Task::Retrieval => None,
            };
            Ok((
                task_metrics(spec.task, &img, &txt, eval_pairs, class_feats.as_ref()),
                outcome.history,
            ))
        }
        Method::Ft | Method::Llft(_) | Method::Lora => {
            // Owner-mode methods edit parameters: train a private copy.
            let mut copy = (**vault).clone();
            let outcome = train_whitebox(&mut copy, spec.vault_seed, train, eval_pairs, config)?;
            let mode = match &outcome.lora {
                Some(att) => Mode::Lora { attachments: att },
                None => Mode::Sealed,
            };
            let (img, txt) = whitebox_eval_features(&copy, mode, eval_pairs)?;
            let class_feats = match spec.task {
                Task::Classification => {
                    let mode = match &outcome.lora {
                        Some(att) => Mode::Lora { attachments: att },
                        None => Mode::Sealed,
                    };
                    Some(whitebox_eval_features(&copy, mode, &class_prompts)?.1)
                }
                Task::Retrieval => None,
            };
            Ok((
                task_metrics(spec.task, &img, &txt, eval_pairs, class_feats.as_ref()),
                outcome.history,
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    AdapterCombos,
    ExtraTokenCount,
    ProxyCount,
    ProxyLayers,
    LastLayers,
}

impl AblationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adapter-combos" => Some(AblationKind::AdapterCombos),
            "extra-tokens" | "extra-token-count" => Some(AblationKind::ExtraTokenCount),
            "proxy-count" => Some(AblationKind::ProxyCount),
            "proxy-layers" => Some(AblationKind::ProxyLayers),
            "last-layers" => Some(AblationKind::LastLayers),
            _ => None,
        }
    }
}

/// The ten input/output adapter combinations of the ablation table, in
/// presentation order.
pub fn adapter_combo_rows() -> Vec<(&'static str, AblationMask)> {
    let m = |in_vis, in_txt, out_vis, out_txt| AblationMask {
        in_vis,
        in_txt,
        out_vis,
        out_txt,
        lga: false,
    };
    vec![
        ("zs", m(false, false, false, false)),
        ("dga-i-txt", m(false, true, false, false)),
        ("dga-i-vis", m(true, false, false, false)),
        ("dga-i", m(true, true, false, false)),
        ("dga-o-txt", m(false, false, false, true)),
        ("dga-o-vis", m(false, false, true, false)),
        ("dga-o", m(false, false, true, true)),
        ("dga-text", m(false, true, false, true)),
        ("dga-vis", m(true, false, true, false)),
        ("dga", m(true, true, true, true)),
    ]
}

/// Runs one ablation grid on the affine-shift task (proxy grids use the
/// frequency task semantics only in how they are read; the grid itself runs
/// on the given spec).
pub fn ablation_suite(
    kind: AblationKind,
    base: &ExperimentSpec,
    template: &TrainConfig,
) -> Result<ExperimentResult, HarnessError> {
    let pretrained = pretrain_vault(base.vault_seed, &super::default_cache_dir())?;
    let vault = Arc::new(pretrained.vault);
    let data = generate_dataset(base.n_train, base.n_test, base.shift, base.data_seed);
    let eval_pairs = unique_pairs(&data.test);

    let mut rows = Vec::new();
    let mut histories = Vec::new();

    let mut run_one = |label: String, config: TrainConfig| -> Result<(), HarnessError> {
        let result = run_method(&vault, base, &config, &data.train, &eval_pairs);
        match result {
            Ok((metrics, history)) => {
                rows.push(MethodRow {
                    method: label.clone(),
                    shade: config.method.shade(),
                    metrics,
                    failed: None,
                });
                histories.push((label, history));
            }
            Err(e) => rows.push(MethodRow {
                method: label,
                shade: config.method.shade(),
                metrics: vec![],
                failed: Some(e.to_string()),
            }),
        }
        Ok(())
    };

    match kind {
        AblationKind::AdapterCombos => {
            for (label, mask) in adapter_combo_rows() {
                if label == "zs" {
                    let mut config = template.clone();
                    config.method = Method::Zs;
                    run_one("zs".into(), config)?;
                    continue;
                }
                let mut config = template.clone();
                config.method = Method::Dga;
                config.adapters = AdapterConfig::with_mask(mask);
                run_one(label.into(), config)?;
            }
        }
        AblationKind::ExtraTokenCount => {
            for k in [1usize, 2, 4, 8] {
                let mut config = template.clone();
                config.method = Method::Dga;
                config.adapters = AdapterConfig::dga();
                config.adapters.extra_tokens = k;
                run_one(format!("extra-{k}"), config)?;
            }
        }
        AblationKind::ProxyCount => {
            for p in [1usize, 2, 4, 8, 16] {
                let mut config = template.clone();
                config.method = Method::Lga;
                config.adapters = AdapterConfig::lga(p);
                run_one(format!("proxy-{p}"), config)?;
            }
        }
        AblationKind::ProxyLayers => {
            for (label, sel) in [
                ("first-half", LayerSelection::FirstHalf),
                ("second-half", LayerSelection::SecondHalf),
                ("all", LayerSelection::All),
            ] {
                let mut config = template.clone();
                config.method = Method::Lga;
                config.adapters = AdapterConfig::lga(1);
                config.adapters.proxy_layers = sel;
                run_one(format!("layers-{label}"), config)?;
            }
        }
        AblationKind::LastLayers => {
            for n in [1usize, 2, 4] {
                let mut config = template.clone();
                config.method = Method::Llft(n);
                run_one(format!("llft-{n}"), config)?;
            }
        }
    }

    Ok(ExperimentResult {
        spec_name: format!("{}-ablation", base.name),
        rows,
        histories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_combo_grid_matches_the_ablation_table() {
        let rows = adapter_combo_rows();
        assert_eq!(rows.len(), 10);
        let labels: Vec<&str> = rows.iter().map(|(l, _)| *l).collect();
        assert!(labels.contains(&"dga-i"));
        assert!(labels.contains(&"dga-o"));
        assert!(labels.contains(&"dga"));
        assert_eq!(labels[0], "zs");
        assert_eq!(labels[9], "dga");
        // All ten masks are distinct.
        let unique: std::collections::HashSet<String> = rows
            .iter()
            .map(|(_, m)| format!("{m:?}"))
            .collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn proxy_layer_grid_spans_both_encoders() {
        let all = AdapterConfig::lga(1);
        let set = crate::adapters::init_adapters::<f32>(&all, 1).unwrap();
        assert_eq!(set.proxies.unwrap().tokens.len(), 2 * 4);
    }

    #[test]
    fn extra_token_count_grows_context_exactly() {
        for k in [1usize, 2, 4, 8] {
            let mut config = AdapterConfig::dga();
            config.extra_tokens = k;
            let set = crate::adapters::init_adapters::<f32>(&config, 1).unwrap();
            let textual = set.textual.unwrap();
            let out = textual
                .apply(&crate::tensor::Tensor::filled(&[3, 64], 0.0))
                .unwrap();
            assert_eq!(out.len(), 3 + k);
        }
    }
}
