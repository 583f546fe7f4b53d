//! Parameter budget per group and per ablation mode.

use std::fmt::Write as _;

use serde::Serialize;

use super::AblationMode;
use crate::conditioning::GroupCounts;
use crate::error::Result;
use crate::model::UNet;
use crate::tensor::{ParamGroup, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: ParamGroup,
    pub tensors: usize,
    pub params: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub mode: AblationMode,
    pub rows: Vec<GroupRow>,
    pub counts: GroupCounts,
    pub trainable: usize,
    pub total: usize,
    /// `2 · d_model² · sites`, the adapter count expected from the layout.
    pub adapter_formula: usize,
}

pub fn report_params<T: Real>(unet: &UNet, store: &ParamStore<T>, mode: AblationMode) -> Result<ParamReport> {
    let part = unet.partition(store)?;
    let c = part.counts;
    let rows = vec![
        GroupRow { group: ParamGroup::Base, tensors: part.frozen_base.len(), params: c.base, trainable: mode.trains(ParamGroup::Base) },
        GroupRow { group: ParamGroup::Lora, tensors: part.lora.len(), params: c.lora, trainable: mode.trains(ParamGroup::Lora) },
        GroupRow { group: ParamGroup::Adapter, tensors: part.adapter.len(), params: c.adapter, trainable: mode.trains(ParamGroup::Adapter) },
    ];
    let trainable = rows.iter().filter(|r| r.trainable).map(|r| r.params).sum();
    let d = unet.config().d_model;
    Ok(ParamReport {
        mode,
        rows,
        counts: c,
        trainable,
        total: c.total(),
        adapter_formula: 2 * d * d * unet.num_sites(),
    })
}

impl ParamReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        let _ = writeln!(s, "{:<10} {:>8} {:>12} {:>10}", "group", "tensors", "params", "trainable");
        for r in &self.rows {
            let name = match r.group {
                ParamGroup::Base => "base",
                ParamGroup::Lora => "lora",
                ParamGroup::Adapter => "adapter",
            };
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>12} {:>10}",
                name,
                r.tensors,
                r.params,
                if r.trainable { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "{:<10} {:>8} {:>12}", "total", "", self.total);
        let _ = writeln!(s, "{:<10} {:>8} {:>12}", "trainable", "", self.trainable);
        if self.mode == AblationMode::Full {
            let _ = writeln!(
                s,
                "lora {} + adapter {} = {}",
                self.counts.lora,
                self.counts.adapter,
                self.counts.lora + self.counts.adapter
            );
        }
        s
    }
}
