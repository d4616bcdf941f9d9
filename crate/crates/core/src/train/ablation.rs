use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use super::{TrainConfig, Trainer};
use crate::data::{split_hash, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::{count_parameters, DaTransUnet, ModelConfig};
use crate::tensor::Scalar;

/// Which attention switches to vary. `skip` toggles all three skip blocks together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationAxes {
    pub encoder: bool,
    pub skip_all: bool,
    pub skip: [bool; 3],
}

impl FromStr for AblationAxes {
    type Err = Error;

    /// Comma-separated subset of `encoder`, `skip`, `skip1`, `skip2`, `skip3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut axes = AblationAxes::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "encoder" => axes.encoder = true,
                "skip" => axes.skip_all = true,
                "skip1" => axes.skip[0] = true,
                "skip2" => axes.skip[1] = true,
                "skip3" => axes.skip[2] = true,
                other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
            }
        }
        if axes.skip_all && axes.skip.iter().any(|&b| b) {
            return Err(Error::Config("`skip` cannot be combined with individual skip axes".into()));
        }
        if !axes.encoder && !axes.skip_all && !axes.skip.iter().any(|&b| b) {
            return Err(Error::Config("no ablation axes given".into()));
        }
        Ok(axes)
    }
}

impl AblationAxes {
    /// Row configurations, encoder setting outermost. Individual skip axes
    /// give: none, each single layer, then all chosen layers together.
    pub fn rows(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let encoders = if self.encoder { vec![false, true] } else { vec![base.enable_encoder_da] };
        let skips: Vec<[bool; 3]> = if self.skip_all {
            vec![[false; 3], [true; 3]]
        } else {
            let chosen: Vec<usize> = (0..3).filter(|&i| self.skip[i]).collect();
            let with = |on: &[usize]| {
                let mut s = base.enable_skip_da;
                for &i in &chosen {
                    s[i] = on.contains(&i);
                }
                s
            };
            let mut v = vec![with(&[])];
            v.extend(chosen.iter().map(|&i| with(&[i])));
            if chosen.len() > 1 {
                v.push(with(&chosen));
            }
            v
        };
        encoders
            .iter()
            .flat_map(|&e| {
                skips.iter().map(move |&s| ModelConfig { enable_encoder_da: e, enable_skip_da: s, ..base.clone() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub row: usize,
    pub encoder_da: bool,
    pub skip1_da: bool,
    pub skip2_da: bool,
    pub skip3_da: bool,
    /// Mean foreground Dice in percent.
    #[serde(rename = "DSC")]
    pub dsc: f64,
    /// Mean foreground 95th-percentile Hausdorff distance in pixels.
    #[serde(rename = "HD")]
    pub hd: f64,
    pub parameters: usize,
    pub final_train_loss: f64,
    pub split_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(format!("writing ablation csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("ablation csv", e))?;
        Ok(())
    }
}

/// Trains and evaluates one model per row on the same split and seed.
pub fn run_ablation<F: Scalar>(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[SegmentationSample],
    test: &[SegmentationSample],
    axes: AblationAxes,
) -> Result<AblationTable> {
    let hash = split_hash(train, test);
    let mut rows = Vec::new();
    for (row, cfg) in axes.rows(base).into_iter().enumerate() {
        let model = DaTransUnet::<F>::new(&cfg)?;
        let mut trainer = Trainer::new(model, train_cfg.clone())?;
        let record = trainer.fit(train, &[])?;
        let report = trainer.evaluate(test)?;
        rows.push(AblationRow {
            row,
            encoder_da: cfg.enable_encoder_da,
            skip1_da: cfg.enable_skip_da[0],
            skip2_da: cfg.enable_skip_da[1],
            skip3_da: cfg.enable_skip_da[2],
            dsc: report.mean_dice * 100.0,
            hd: report.mean_hd95,
            parameters: count_parameters(&cfg),
            final_train_loss: record.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            split_hash: hash.clone(),
            seed: cfg.seed,
        });
    }
    Ok(AblationTable { rows })
}
