//! Sweeps over propagation modes, the memory token and joint-block
//! placement, each trained from scratch and scored on the validation split.

use std::collections::HashMap;

use jointformer::metrics::EvalReport;
use jointformer::trainer::{train_loop, validate_model, TrainConfig, Trainer};
use jointformer::{BlockLocations, Model, PropagationMode, Result};

use crate::config::RunConfig;
use crate::datasets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Setting {
    pub mode: PropagationMode,
    pub memory: bool,
    pub locations: BlockLocations,
}

impl Setting {
    pub const BASE: Setting = Setting {
        mode: PropagationMode::D,
        memory: true,
        locations: BlockLocations::All,
    };
}

/// `(table, row label, setting)` for every row of the sweep.
pub fn sweep() -> Vec<(&'static str, String, Setting)> {
    let mut rows = Vec::new();
    for mode in PropagationMode::ALL {
        rows.push(("modes", mode.to_string(), Setting { mode, ..Setting::BASE }));
    }
    for memory in [true, false] {
        let label = if memory { "on" } else { "off" };
        rows.push(("memory", label.to_string(), Setting { memory, ..Setting::BASE }));
    }
    for locations in BlockLocations::ALL {
        rows.push(("locations", locations.to_string(), Setting { locations, ..Setting::BASE }));
    }
    rows
}

/// Trains one setting for `budget` iterations and scores it.
pub fn run_setting(cfg: &RunConfig, setting: Setting, seed: u64, budget: usize) -> Result<EvalReport> {
    let (train, val) = datasets(cfg, seed)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.memory = setting.memory;
    model_cfg.locations = setting.locations;
    let train_cfg = TrainConfig {
        iterations: budget,
        seed,
        mode: setting.mode,
        val_every: 0,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(Model::init(model_cfg, seed)?, train_cfg)?;
    train_loop(&mut trainer, &train, &[], |_| {})?;
    let inf = jointformer::inference::InferenceConfig {
        mode: setting.mode,
        ..cfg.inference.clone()
    };
    validate_model(&trainer.model, &val, &inf)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub setting: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Runs every distinct setting once per seed and averages over seeds.
pub fn ablate(
    cfg: &RunConfig,
    budget: usize,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut cache: HashMap<(Setting, u64), EvalReport> = HashMap::new();
    let mut rows = Vec::new();
    for (table, label, setting) in sweep() {
        let (mut j, mut f, mut jf) = (0.0, 0.0, 0.0);
        for &seed in seeds {
            if !cache.contains_key(&(setting, seed)) {
                progress(&format!("{table}={label} seed={seed}"));
                let r = run_setting(cfg, setting, seed, budget)?;
                cache.insert((setting, seed), r);
            }
            let r = &cache[&(setting, seed)];
            j += r.mean_j;
            f += r.mean_f;
            jf += r.mean_jf;
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            table,
            setting: label,
            j: j / n,
            f: f / n,
            jf: jf / n,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("table,setting,J,F,JF\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.table, r.setting, r.j, r.f, r.jf));
    }
    s
}

/// Orderings expected of the sweep that the measured rows break.
pub fn reversals(rows: &[AblationRow]) -> Vec<String> {
    let find = |table: &str, setting: &str| {
        rows.iter()
            .find(|r| r.table == table && r.setting == setting)
            .map(|r| r.jf)
    };
    let mut out = Vec::new();
    if let (Some(d), Some(a)) = (find("modes", "d"), find("modes", "a")) {
        if d < a {
            out.push(format!("mode d ({d:.4}) below mode a ({a:.4})"));
        }
    }
    if let (Some(on), Some(off)) = (find("memory", "on"), find("memory", "off")) {
        if on < off {
            out.push(format!("memory on ({on:.4}) below memory off ({off:.4})"));
        }
    }
    out
}
