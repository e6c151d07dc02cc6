//! Trains several configurations under identical data, seed and optimizer
//! and tabulates their validation mAP.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::nn::{BlockVariant, DropoutPlacement, ParamStore};
use crate::scalar::Real;
use crate::synth::{Dataset, Scene};
use crate::train::{evaluate_scenes, train_at_precision, EpochMetrics, CHECKPOINT_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cfg: RunConfig,
}

/// Rows in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<(String, f64)>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("variant".len());
        let mut out = format!("{:<width$}  mAP\n", "variant");
        for (name, map) in &self.rows {
            let _ = writeln!(out, "{name:<width$}  {map:.4}");
        }
        out
    }
}

/// Expands a sweep description against `base`:
/// `k=1,3,7` varies the pooling grid; `variants=original/none,bn_after_add/after_first_pool`
/// varies block wiring and dropout placement together.
pub fn parse_sweep(spec: &str, base: &RunConfig) -> Result<Vec<Variant>> {
    let (kind, list) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not <kind>=<items>")))?;
    let items: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let variants = match kind.trim() {
        "k" => items
            .iter()
            .map(|it| {
                let k: usize = it
                    .parse()
                    .map_err(|_| Error::Config(format!("bad grid size {it:?} in sweep")))?;
                let mut cfg = base.clone();
                cfg.net.ps_k = k;
                Ok(Variant {
                    name: format!("k={k}"),
                    cfg,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        "variants" => items
            .iter()
            .map(|it| {
                let (block, drop) = it
                    .split_once('/')
                    .ok_or_else(|| Error::Config(format!("variant {it:?} is not <block>/<dropout>")))?;
                let mut cfg = base.clone();
                cfg.net.block_variant = block.parse::<BlockVariant>()?;
                cfg.net.dropout.placement = drop.parse::<DropoutPlacement>()?;
                Ok(Variant {
                    name: (*it).to_owned(),
                    cfg,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        other => return Err(Error::Config(format!("unknown sweep kind {other:?} (k, variants)"))),
    };
    for v in &variants {
        v.cfg.validate()?;
    }
    Ok(variants)
}

fn evaluate_checkpoint<T: Real>(dir: &Path, cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalReport> {
    let store = ParamStore::<T>::load(&dir.join(CHECKPOINT_FILE))?;
    evaluate_scenes(&store, cfg, scenes)
}

/// Trains every variant into `out_dir/<index>` and reports its final
/// validation mAP.
pub fn ablation_sweep(
    variants: &[Variant],
    dataset: &Dataset,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&str, &EpochMetrics),
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config(format!(
            "a comparison needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (i, v) in variants.iter().enumerate() {
        let dir = out_dir.join(format!("{i:02}"));
        let metrics = train_at_precision(dataset, &v.cfg, &dir, &mut |m| on_epoch(&v.name, m))?;
        let map = match metrics.last() {
            Some(m) => m.val_map,
            None => match v.cfg.precision {
                Precision::F32 => evaluate_checkpoint::<f32>(&dir, &v.cfg, &dataset.val)?.map,
                Precision::F64 => evaluate_checkpoint::<f64>(&dir, &v.cfg, &dataset.val)?.map,
            },
        };
        rows.push((v.name.clone(), map));
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_sweep_has_three_variants() {
        let v = parse_sweep("k=1,3,7", &RunConfig::default()).unwrap();
        let ks: Vec<usize> = v.iter().map(|v| v.cfg.net.ps_k).collect();
        assert_eq!(ks, vec![1, 3, 7]);
        assert_eq!(v[0].name, "k=1");
    }

    #[test]
    fn variant_sweep_parses_pairs() {
        let v = parse_sweep(
            "variants=original/none,original/after_first_pool,bn_after_add/none,no_second_relu/inside_block",
            &RunConfig::default(),
        )
        .unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[2].cfg.net.block_variant, BlockVariant::BnAfterAdd);
        assert_eq!(v[3].cfg.net.dropout.placement, DropoutPlacement::InsideBlock);
        assert!(parse_sweep("variants=original", &RunConfig::default()).is_err());
        assert!(parse_sweep("depth=1,2", &RunConfig::default()).is_err());
        assert!(parse_sweep("k=0", &RunConfig::default()).is_err());
    }

    #[test]
    fn table_layout() {
        let t = AblationTable {
            rows: vec![("k=1".into(), 0.5), ("k=3".into(), 0.81234)],
        };
        assert_eq!(t.render(), "variant  mAP\nk=1      0.5000\nk=3      0.8123\n");
    }
}
