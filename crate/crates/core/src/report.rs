//! CSV outputs. Every file opens with a `# tokensync config_hash=<hex> seed=<n>` comment line,
//! then a header row. Undefined values are empty cells. Floats use the shortest representation
//! that round-trips, so identical results give identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ClipMetrics, SweepRow, WinRateTable};
use crate::protocol::KeyframePolicy;
use crate::utility::Perplexity;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("# tokensync config_hash={} seed={}", self.config_hash, self.seed)
    }
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "policy",
    "kind",
    "n",
    "tau_h",
    "n_max",
    "budget_bytes",
    "capacity",
    "drop_prob",
    "bitrate_mbps",
    "d_dyn",
    "mismatch",
    "keyframes_per_clip",
    "n_clips",
    "n_undefined_ddyn",
];

pub const KEYFRAME_COLUMNS: &[&str] = &["tau_h", "n_max", "budget_bytes", "keyframes_per_clip", "bitrate_mbps"];

pub const UTILITY_COLUMNS: &[&str] = &[
    "policy",
    "kind",
    "n",
    "tau_h",
    "n_max",
    "budget_bytes",
    "drop_prob",
    "bitrate_mbps",
    "ppl_all",
    "ppl_dyn",
    "ce_all_nats",
    "ce_dyn_nats",
    "n_samples_all",
    "n_samples_dyn",
];

pub const WINRATE_COLUMNS: &[&str] = &[
    "row_type",
    "seed_index",
    "adaptive",
    "periodic",
    "budget_bytes",
    "drop_prob",
    "adaptive_bitrate_mbps",
    "periodic_bitrate_mbps",
    "gap_mbps",
    "adaptive_d_dyn",
    "periodic_d_dyn",
    "d_dyn_diff",
    "win",
    "wins",
    "n_seeds",
    "win_rate",
    "mean_diff",
    "std_diff",
    "subset_size",
];

pub const CLIP_COLUMNS: &[&str] = &[
    "clip_id",
    "policy",
    "budget_bytes",
    "drop_prob",
    "timesteps",
    "bytes_total",
    "keyframes",
    "sent_deltas",
    "dropped_deltas",
    "bitrate_mbps",
    "d_dyn",
    "mismatch",
];

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt_f64)
}

fn policy_cells(p: &KeyframePolicy) -> [String; 4] {
    match *p {
        KeyframePolicy::Periodic { n } => ["periodic".into(), n.to_string(), String::new(), String::new()],
        KeyframePolicy::Adaptive { tau_h, n_max } => {
            ["adaptive".into(), String::new(), fmt_f64(tau_h), n_max.to_string()]
        }
    }
}

/// Writes one CSV file: provenance line, header row, then `rows`.
pub fn write_csv(
    path: impl AsRef<Path>,
    provenance: &Provenance,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let mut buf = Vec::new();
    writeln!(buf, "{}", provenance.line()).map_err(io)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(columns).map_err(csv_err)?;
        for row in rows {
            debug_assert_eq!(row.len(), columns.len());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
    }
    fs::write(path, buf).map_err(io)
}

pub fn sweep_row_cells(r: &SweepRow) -> Vec<String> {
    let [kind, n, tau, n_max] = policy_cells(&r.policy);
    vec![
        r.policy_id(),
        kind,
        n,
        tau,
        n_max,
        r.budget_bytes.to_string(),
        r.capacity.to_string(),
        fmt_f64(r.drop_prob),
        fmt_f64(r.agg.bitrate_mbps),
        fmt_opt(r.agg.d_dyn),
        fmt_f64(r.agg.mismatch),
        fmt_f64(r.agg.keyframes_per_clip),
        r.agg.n_clips.to_string(),
        r.agg.n_undefined_ddyn.to_string(),
    ]
}

/// Lossless rows only.
pub fn write_rd_curve(path: impl AsRef<Path>, prov: &Provenance, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path,
        prov,
        SWEEP_COLUMNS,
        rows.iter().filter(|r| r.drop_prob == 0.0).map(sweep_row_cells),
    )
}

pub fn write_loss_robustness(path: impl AsRef<Path>, prov: &Provenance, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, prov, SWEEP_COLUMNS, rows.iter().map(sweep_row_cells))
}

/// One row per adaptive `(tau_h, B)` at zero loss.
pub fn write_keyframes_vs_tau(path: impl AsRef<Path>, prov: &Provenance, rows: &[SweepRow]) -> Result<()> {
    let cells = rows
        .iter()
        .filter(|r| r.drop_prob == 0.0)
        .filter_map(|r| match r.policy {
            KeyframePolicy::Adaptive { tau_h, n_max } => Some(vec![
                fmt_f64(tau_h),
                n_max.to_string(),
                r.budget_bytes.to_string(),
                fmt_f64(r.agg.keyframes_per_clip),
                fmt_f64(r.agg.bitrate_mbps),
            ]),
            KeyframePolicy::Periodic { .. } => None,
        });
    write_csv(path, prov, KEYFRAME_COLUMNS, cells)
}

fn ppl_cells(p: Option<Perplexity>) -> (String, String, String) {
    match p {
        Some(p) => (fmt_f64(p.value), fmt_f64(p.cross_entropy_nats), p.n_samples.to_string()),
        None => (String::new(), String::new(), "0".into()),
    }
}

/// Rows that carry probe scores.
pub fn write_utility(path: impl AsRef<Path>, prov: &Provenance, rows: &[SweepRow]) -> Result<()> {
    let cells = rows.iter().filter(|r| r.agg.ppl_all.is_some()).map(|r| {
        let [kind, n, tau, n_max] = policy_cells(&r.policy);
        let (pa, ca, na) = ppl_cells(r.agg.ppl_all);
        let (pd, cd, nd) = ppl_cells(r.agg.ppl_dyn);
        vec![
            r.policy_id(),
            kind,
            n,
            tau,
            n_max,
            r.budget_bytes.to_string(),
            fmt_f64(r.drop_prob),
            fmt_f64(r.agg.bitrate_mbps),
            pa,
            pd,
            ca,
            cd,
            na,
            nd,
        ]
    });
    write_csv(path, prov, UTILITY_COLUMNS, cells)
}

/// Paired rows (`row_type = pair`) then one summary per adaptive configuration.
pub fn write_winrate(path: impl AsRef<Path>, prov: &Provenance, table: &WinRateTable) -> Result<()> {
    let blank = || String::new();
    let pairs = table.records.iter().map(|rec| {
        let p = &rec.pair;
        vec![
            "pair".into(),
            rec.seed_index.to_string(),
            p.adaptive.policy_id(),
            p.periodic.policy_id(),
            p.adaptive.budget_bytes.to_string(),
            fmt_f64(p.adaptive.drop_prob),
            fmt_f64(p.adaptive.agg.bitrate_mbps),
            fmt_f64(p.periodic.agg.bitrate_mbps),
            fmt_f64(p.gap_mbps),
            fmt_opt(p.adaptive.agg.d_dyn),
            fmt_opt(p.periodic.agg.d_dyn),
            fmt_opt(p.d_dyn_diff()),
            (rec.win as u8).to_string(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            table.subset_size.to_string(),
        ]
    });
    let summaries = table.summaries.iter().map(|s| {
        vec![
            "summary".into(),
            blank(),
            s.adaptive.id(),
            blank(),
            s.budget_bytes.to_string(),
            fmt_f64(s.drop_prob),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            s.wins.to_string(),
            s.n_seeds.to_string(),
            fmt_f64(s.win_rate()),
            fmt_f64(s.mean_diff),
            fmt_f64(s.std_diff),
            table.subset_size.to_string(),
        ]
    });
    write_csv(path, prov, WINRATE_COLUMNS, pairs.chain(summaries).collect::<Vec<_>>())
}

/// Per-clip metrics for every row, clip-major within each row.
pub fn write_clip_metrics(
    path: impl AsRef<Path>,
    prov: &Provenance,
    rows: &[SweepRow],
    per_clip: &[Vec<ClipMetrics>],
) -> Result<()> {
    let cells = rows.iter().zip(per_clip).flat_map(|(r, clips)| {
        clips.iter().enumerate().map(move |(c, m)| {
            vec![
                c.to_string(),
                r.policy_id(),
                r.budget_bytes.to_string(),
                fmt_f64(r.drop_prob),
                m.timesteps.to_string(),
                m.bytes_total.to_string(),
                m.keyframes.to_string(),
                m.sent_deltas.to_string(),
                m.dropped_deltas.to_string(),
                fmt_f64(m.bitrate_mbps()),
                fmt_opt(m.d_dyn()),
                fmt_f64(m.mismatch_rate()),
            ]
        })
    });
    write_csv(path, prov, CLIP_COLUMNS, cells)
}
