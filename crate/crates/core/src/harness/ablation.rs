use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::train::{evaluate_model, train, TrainProgress};
use crate::data::DatasetPools;
use crate::episodic::{EvalReport, PipelineFlags};
use crate::{Error, Result};

/// Ablation rows. `C3` and `Full` are the same model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    C0,
    C1,
    C2,
    C3,
    C4,
    Full,
    BasTwice,
    WithBb,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::B0,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::C0,
        Variant::C1,
        Variant::C2,
        Variant::C3,
        Variant::C4,
        Variant::Full,
        Variant::BasTwice,
        Variant::WithBb,
    ];

    /// The two component grids.
    pub const TABLE: [Variant; 9] = [
        Variant::B0,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::C0,
        Variant::C1,
        Variant::C2,
        Variant::C3,
        Variant::C4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::B0 => "B0",
            Variant::B1 => "B1",
            Variant::B2 => "B2",
            Variant::B3 => "B3",
            Variant::C0 => "C0",
            Variant::C1 => "C1",
            Variant::C2 => "C2",
            Variant::C3 => "C3",
            Variant::C4 => "C4",
            Variant::Full => "full",
            Variant::BasTwice => "bas_twice",
            Variant::WithBb => "with_bb",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::B0 => "raw stage, cosine over pooled features",
            Variant::B1 => "raw stage, local metric",
            Variant::B2 => "refined stage, local metric",
            Variant::B3 => "raw + refined stages, local metric",
            Variant::C0 => "raw + refined stages, cosine over pooled features",
            Variant::C1 => "C0 + local metric",
            Variant::C2 => "C1 + alignment",
            Variant::C3 => "C2 + attentive erasing (full model)",
            Variant::C4 => "C3 without background suppression",
            Variant::Full => "full model",
            Variant::BasTwice => "full model, suppression applied twice",
            Variant::WithBb => "full model on ground-truth box crops",
        }
    }

    pub fn flags(self) -> PipelineFlags {
        let f = |raw_stage, refined_stage, local_metric, alignment, erasing| PipelineFlags {
            raw_stage,
            refined_stage,
            local_metric,
            alignment,
            erasing,
            bas_passes: 1,
        };
        match self {
            Variant::B0 => f(true, false, false, false, false),
            Variant::B1 => f(true, false, true, false, false),
            Variant::B2 => f(false, true, true, false, false),
            Variant::B3 | Variant::C1 => f(true, true, true, false, false),
            Variant::C0 => f(true, true, false, false, false),
            Variant::C2 => f(true, true, true, true, false),
            Variant::C3 | Variant::Full | Variant::WithBb => f(true, true, true, true, true),
            Variant::C4 => f(true, false, true, true, true),
            Variant::BasTwice => PipelineFlags {
                bas_passes: 2,
                ..f(true, true, true, true, true)
            },
        }
    }

    /// Whether inputs are cropped to their ground-truth boxes first.
    pub fn use_gt_box(self) -> bool {
        self == Variant::WithBb
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub flags: PipelineFlags,
    pub report: EvalReport,
    pub run_dir: PathBuf,
}

/// Trains and evaluates each variant under `cfg`, then writes `ablation.json` and
/// `ablation.tsv` into `out_dir`.
pub fn run_ablation(
    cfg: &Config,
    pools: &DatasetPools,
    variants: &[Variant],
    out_dir: &Path,
    progress: &mut dyn FnMut(TrainProgress<'_>),
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.set_variant(variant);
        let run_dir = out_dir.join(variant.as_str());
        let (model, _) = train(&vcfg, pools, &run_dir, &mut *progress)?;
        let report = evaluate_model(&model, &vcfg, &pools.novel, &pools.split.base, Some(&run_dir))?;
        rows.push(AblationRow {
            variant,
            description: variant.description().to_string(),
            flags: vcfg.flags(),
            report,
            run_dir,
        });
    }
    write_table(&rows, out_dir)?;
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tmean_accuracy\tci95_halfwidth\tn_episodes\traw\trefined\tlocal\talign\terase\tdescription\n");
    for r in rows {
        let b = |v: bool| if v { "1" } else { "0" };
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.report.mean_accuracy,
            r.report.ci95_halfwidth,
            r.report.n_episodes,
            b(r.flags.raw_stage),
            b(r.flags.refined_stage),
            b(r.flags.local_metric),
            b(r.flags.alignment),
            b(r.flags.erasing),
            r.description
        ));
    }
    out
}

fn write_table(rows: &[AblationRow], out_dir: &Path) -> Result<()> {
    let json = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(rows).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let tsv = out_dir.join("ablation.tsv");
    fs::write(&tsv, format_table(rows)).map_err(|e| Error::io(&tsv, e))
}
