//! Embedded table of best-tuned learning rates for the benchmark grid.
//!
//! Keys follow `<algorithm>/<dataset>/n<cohort>`, e.g.
//! `defedavg_iid/fashionmnist/n10`. Two-rate methods carry both `eta`
//! (global) and `eta_bar` (local); single-rate methods leave the unused
//! field `None`. The `favano_*` rows are reference data only — that
//! algorithm is not implemented here, and resolving such a preset into a
//! runnable policy fails.

use crate::algorithms::PolicyKind;

/// One tuned cell of the rate table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub algorithm: &'static str,
    pub dataset: &'static str,
    /// Participants aggregated per round.
    pub n: usize,
    /// Global learning rate; `None` for single-rate methods.
    pub eta: Option<f64>,
    /// Local learning rate; `None` for methods with only a global rate.
    pub eta_bar: Option<f64>,
}

impl Preset {
    /// Canonical lookup key, `<algorithm>/<dataset>/n<cohort>`.
    pub fn key(&self) -> String {
        format!("{}/{}/n{}", self.algorithm, self.dataset, self.n)
    }

    /// The runnable policy this row maps to, if any.
    pub fn policy_kind(&self) -> Option<PolicyKind> {
        match self.algorithm {
            "defedavg_niid" => Some(PolicyKind::DefedavgNiid),
            "defedavg_iid" => Some(PolicyKind::DefedavgIid),
            "fedavg_iid" | "fedavg_niid" => Some(PolicyKind::FedAvg),
            "fedbuff" => Some(PolicyKind::FedBuff),
            "asysg" => Some(PolicyKind::Asysg),
            _ => None,
        }
    }
}

const fn cell(
    algorithm: &'static str,
    dataset: &'static str,
    n: usize,
    eta: Option<f64>,
    eta_bar: Option<f64>,
) -> Preset {
    Preset { algorithm, dataset, n, eta, eta_bar }
}

const FM: &str = "fashionmnist";
const C10: &str = "cifar10";

/// The full tuned-rate grid. The two delayed-averaging variants cover
/// n = 5..80; the baselines were tuned for n = 10..80 only.
pub const PRESETS: &[Preset] = &[
    // defedavg_niid: eta 0.10 across the board; eta_bar 0.05 except
    // cifar10 n=20 which preferred 0.10.
    cell("defedavg_niid", FM, 5, Some(0.10), Some(0.05)),
    cell("defedavg_niid", FM, 10, Some(0.10), Some(0.05)),
    cell("defedavg_niid", FM, 20, Some(0.10), Some(0.05)),
    cell("defedavg_niid", FM, 40, Some(0.10), Some(0.05)),
    cell("defedavg_niid", FM, 80, Some(0.10), Some(0.05)),
    cell("defedavg_niid", C10, 5, Some(0.10), Some(0.05)),
    cell("defedavg_niid", C10, 10, Some(0.10), Some(0.05)),
    cell("defedavg_niid", C10, 20, Some(0.10), Some(0.10)),
    cell("defedavg_niid", C10, 40, Some(0.10), Some(0.05)),
    cell("defedavg_niid", C10, 80, Some(0.10), Some(0.05)),
    // defedavg_iid
    cell("defedavg_iid", FM, 5, Some(0.10), Some(0.05)),
    cell("defedavg_iid", FM, 10, Some(0.10), Some(0.05)),
    cell("defedavg_iid", FM, 20, Some(0.10), Some(0.05)),
    cell("defedavg_iid", FM, 40, Some(0.10), Some(0.05)),
    cell("defedavg_iid", FM, 80, Some(1.00), Some(0.10)),
    cell("defedavg_iid", C10, 5, Some(0.10), Some(0.05)),
    cell("defedavg_iid", C10, 10, Some(1.00), Some(0.05)),
    cell("defedavg_iid", C10, 20, Some(0.10), Some(0.01)),
    cell("defedavg_iid", C10, 40, Some(0.10), Some(0.05)),
    cell("defedavg_iid", C10, 80, Some(1.00), Some(0.01)),
    // fedavg under IID partitioning: eta pinned at 1.00.
    cell("fedavg_iid", FM, 10, Some(1.00), Some(0.10)),
    cell("fedavg_iid", FM, 20, Some(1.00), Some(0.01)),
    cell("fedavg_iid", FM, 40, Some(1.00), Some(0.01)),
    cell("fedavg_iid", FM, 80, Some(1.00), Some(0.01)),
    cell("fedavg_iid", C10, 10, Some(1.00), Some(0.01)),
    cell("fedavg_iid", C10, 20, Some(1.00), Some(0.01)),
    cell("fedavg_iid", C10, 40, Some(1.00), Some(0.01)),
    cell("fedavg_iid", C10, 80, Some(1.00), Some(0.01)),
    // fedavg under label-skew partitioning.
    cell("fedavg_niid", FM, 10, Some(0.10), Some(0.05)),
    cell("fedavg_niid", FM, 20, Some(0.10), Some(0.05)),
    cell("fedavg_niid", FM, 40, Some(1.00), Some(0.01)),
    cell("fedavg_niid", FM, 80, Some(0.10), Some(0.10)),
    cell("fedavg_niid", C10, 10, Some(1.00), Some(0.01)),
    cell("fedavg_niid", C10, 20, Some(1.00), Some(0.01)),
    cell("fedavg_niid", C10, 40, Some(0.10), Some(0.05)),
    cell("fedavg_niid", C10, 80, Some(0.10), Some(0.05)),
    // fedbuff (tuned on the label-skew split).
    cell("fedbuff", FM, 10, Some(0.10), Some(0.005)),
    cell("fedbuff", FM, 20, Some(0.10), Some(0.01)),
    cell("fedbuff", FM, 40, Some(0.10), Some(0.01)),
    cell("fedbuff", FM, 80, Some(0.10), Some(0.05)),
    cell("fedbuff", C10, 10, Some(0.10), Some(0.01)),
    cell("fedbuff", C10, 20, Some(0.10), Some(0.01)),
    cell("fedbuff", C10, 40, Some(0.10), Some(0.01)),
    cell("fedbuff", C10, 80, Some(0.10), Some(0.05)),
    // asysg: one server-side rate, stored as eta_bar (the policy runs
    // with a unit global rate and K = 1).
    cell("asysg", FM, 10, None, Some(0.10)),
    cell("asysg", FM, 20, None, Some(0.10)),
    cell("asysg", FM, 40, None, Some(0.10)),
    cell("asysg", FM, 80, None, Some(0.10)),
    cell("asysg", C10, 10, None, Some(0.10)),
    cell("asysg", C10, 20, None, Some(0.10)),
    cell("asysg", C10, 40, None, Some(0.10)),
    cell("asysg", C10, 80, None, Some(0.10)),
    // favano: reference rows only (single local rate; no runnable
    // policy in this library).
    cell("favano_iid", FM, 10, None, Some(0.10)),
    cell("favano_iid", FM, 20, None, Some(0.10)),
    cell("favano_iid", FM, 40, None, Some(0.10)),
    cell("favano_iid", FM, 80, None, Some(0.10)),
    cell("favano_iid", C10, 10, None, Some(0.05)),
    cell("favano_iid", C10, 20, None, Some(0.05)),
    cell("favano_iid", C10, 40, None, Some(0.05)),
    cell("favano_iid", C10, 80, None, Some(0.05)),
    cell("favano_niid", FM, 10, None, Some(0.05)),
    cell("favano_niid", FM, 20, None, Some(0.05)),
    cell("favano_niid", FM, 40, None, Some(0.05)),
    cell("favano_niid", FM, 80, None, Some(0.05)),
    cell("favano_niid", C10, 10, None, Some(0.05)),
    cell("favano_niid", C10, 20, None, Some(0.05)),
    cell("favano_niid", C10, 40, None, Some(0.05)),
    cell("favano_niid", C10, 80, None, Some(0.05)),
];

/// Looks up a preset by its `<algorithm>/<dataset>/n<cohort>` key.
pub fn lookup(key: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.key() == key)
}
