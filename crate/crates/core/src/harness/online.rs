//! Online adaptation against the real plant.

use std::io::{Read, Write};

use super::config::{CaseId, ScenarioConfig};
use crate::dynamics::{integrate_rk4, noisy_xdot, vdp_derivative};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mlp::{Checkpoint, Mlp};
use crate::specnorm::{lipschitz_bound, LipschitzReport};
use crate::sta::{case1_step, case2_step, AdaptState, PerturbationReference, StaGains, StepDiagnostics};

/// Slack on `‖Γ − Γ̂‖ ≤ γ‖ẋ − x̂̇‖` for floating-point rounding.
pub const BOUND_SLACK: f64 = 1e-9;

/// `|ŷ|` beyond which an online run is declared diverged. The plant output
/// stays within single digits, so anything this large is runaway adaptation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const REPORT_HEADER: [&str; 9] = [
    "t", "y_true", "y_hat", "e1", "gamma", "gamma_hat", "p1_norm", "p1_bound", "z2_hat",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub case: CaseId,
    pub adaptive: bool,
    pub trailing_window: f64,
    pub trailing_max_abs_e1: f64,
    pub trailing_rmse: f64,
    pub bound_gamma: Option<f64>,
    pub bound_violations: usize,
    pub dead_basis_steps: usize,
    /// Time of the first step whose prediction left [`DIVERGENCE_LIMIT`] or
    /// stopped being finite. The run stops there and the trailing metrics
    /// are infinite.
    pub diverged_at: Option<f64>,
    /// Set when the run was preceded by training in the same process.
    pub training_final_loss: Option<f64>,
    pub lipschitz: LipschitzReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub steps: Vec<StepDiagnostics>,
    pub summary: RunSummary,
}

/// Number of recorded rows for a horizon, including `t = 0`.
pub fn online_rows(t_online: f64, dt: f64) -> usize {
    (t_online / dt).round() as usize + 1
}

/// Drives the real plant with RK4 and adapts the last layer once per `dt`.
///
/// The input derivative is `ẋ = [ŷ, z]`: the network's own prediction stands
/// in for `ż`, and `θ̇ = z` is exact. Cases II add the configured noise to
/// form `x̂̇` and score `Γ̂` against the noise-free `Γ`. The final row is
/// recorded but not applied. Runaway adaptation ends the run early with
/// [`RunSummary::diverged_at`] set; only the plant going non-finite is an error.
pub fn run_online(cfg: &ScenarioConfig, checkpoint: &Checkpoint) -> Result<RunReport> {
    cfg.validate()?;
    let mut net = checkpoint.network()?;
    if net.shape() != cfg.net_shape {
        return Err(Error::shape(
            "checkpoint vs config",
            format!("{:?}", cfg.net_shape),
            format!("{:?}", net.shape()),
        ));
    }
    let lipschitz = lipschitz_bound(&net)?;
    let lipschitz = match checkpoint.gamma {
        Some(g) => LipschitzReport {
            certified_gamma: g,
            ..lipschitz
        },
        None => lipschitz,
    };
    let real = cfg.real();
    let rows = online_rows(cfg.t_online, cfg.dt);
    let frozen_gains = StaGains { k1: 0.0, k2: 0.0 };
    let mut state = AdaptState::new(net.output_dim(), cfg.gains.unwrap_or(frozen_gains));
    let mut plant = cfg.initial_state;
    let bound_gamma = cfg.bound_gamma.unwrap_or(lipschitz.certified_gamma);
    let mut steps = Vec::with_capacity(rows);
    let mut diverged_at = None;

    for k in 0..rows {
        let t = k as f64 * cfg.dt;
        if !plant.is_finite() {
            return Err(Error::NonFinite { context: "plant state", step: k });
        }
        let x = plant.as_array();
        let (y_hat, cache) = net.forward(&x)?;
        let y_true = [vdp_derivative(plant, real).0];
        let x_dot = Vector::from([y_hat[0], plant.z]);
        let out = if cfg.case.uses_estimate() {
            let est = noisy_xdot(&x_dot, &cfg.noise, t)?;
            let reference = PerturbationReference {
                x_dot: &x_dot,
                gamma: bound_gamma,
            };
            case2_step(&net, &cache, &est, &y_true, &state, cfg.dt, t, Some(reference))?
        } else {
            case1_step(&net, &cache, &x_dot, &y_true, &state, cfg.dt, t)?
        };
        let d = &out.diagnostics;
        let runaway = d.y_hat.iter().any(|v| v.abs() > DIVERGENCE_LIMIT);
        if runaway || !d.y_hat.is_finite() || !d.gamma.is_finite() || !d.gamma_hat.is_finite() {
            diverged_at = Some(t);
            break;
        }
        steps.push(out.diagnostics);
        if k + 1 < rows {
            if cfg.gains.is_some() {
                net.set_last_layer(out.last_layer)?;
                state = out.state;
            }
            plant = integrate_rk4(plant, real, cfg.dt);
        }
    }

    let mut summary = summarize(cfg, &steps, lipschitz, bound_gamma);
    if diverged_at.is_some() {
        summary.diverged_at = diverged_at;
        summary.trailing_max_abs_e1 = f64::INFINITY;
        summary.trailing_rmse = f64::INFINITY;
    }
    Ok(RunReport { steps, summary })
}

fn summarize(cfg: &ScenarioConfig, steps: &[StepDiagnostics], lipschitz: LipschitzReport, bound_gamma: f64) -> RunSummary {
    let start = cfg.t_online - cfg.trailing_window - 1e-9 * cfg.dt;
    let window: Vec<&StepDiagnostics> = steps.iter().filter(|s| s.t >= start).collect();
    let e1 = window.iter().flat_map(|s| s.e1.iter().copied());
    let trailing_max_abs_e1 = e1.clone().map(f64::abs).fold(0.0, f64::max);
    let (sum_sq, n) = e1.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    RunSummary {
        case: cfg.case,
        adaptive: cfg.gains.is_some(),
        trailing_window: cfg.trailing_window,
        trailing_max_abs_e1,
        trailing_rmse: (sum_sq / n.max(1) as f64).sqrt(),
        bound_gamma: cfg.case.uses_estimate().then_some(bound_gamma),
        bound_violations: steps.iter().filter(|s| s.p1_norm > s.p1_bound + BOUND_SLACK).count(),
        dead_basis_steps: steps.iter().filter(|s| s.dead_basis).count(),
        diverged_at: None,
        training_final_loss: None,
        lipschitz,
    }
}

/// e1 from the static network on the real plant: the error adaptation has to beat.
pub fn static_error(net: &Mlp, cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    let real = cfg.real();
    let mut plant = cfg.initial_state;
    let rows = online_rows(cfg.t_online, cfg.dt);
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        out.push(net.predict(&plant.as_array())?[0] - vdp_derivative(plant, real).0);
        plant = integrate_rk4(plant, real, cfg.dt);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundVerdict {
    pub passed: bool,
    pub steps_checked: usize,
    pub violations: usize,
    /// Step with the largest `p1_norm − p1_bound`, and that excess.
    pub worst_step: Option<usize>,
    pub worst_excess: f64,
    /// Whether the bound's γ is backed by the checkpoint's training certificate.
    pub certified: bool,
}

/// Checks `‖Γ − Γ̂‖ ≤ γ‖ẋ − x̂̇‖` at every recorded step.
pub fn verify_bounds(report: &RunReport, checkpoint: &Checkpoint) -> BoundVerdict {
    let mut worst_step = None;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violations = 0;
    for (i, s) in report.steps.iter().enumerate() {
        let excess = s.p1_norm - s.p1_bound;
        if excess > worst_excess {
            worst_excess = excess;
            worst_step = Some(i);
        }
        if excess > BOUND_SLACK {
            violations += 1;
        }
    }
    let certified = match (checkpoint.gamma, report.summary.bound_gamma) {
        (Some(trained), Some(line)) => line >= trained,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    BoundVerdict {
        passed: violations == 0,
        steps_checked: report.steps.len(),
        violations,
        worst_step,
        worst_excess,
        certified,
    }
}

/// One time point of the bound comparison; `None` once that run has diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSeriesRow {
    pub t: f64,
    pub p1_certified: Option<f64>,
    pub p1_uncertified: Option<f64>,
    pub bound: Option<f64>,
}

/// The two `‖Γ − Γ̂‖` series side by side with the certified bound line, on
/// the time grid of the longer run.
pub fn bound_series(certified: &RunReport, uncertified: &RunReport) -> Result<Vec<BoundSeriesRow>> {
    let n = certified.steps.len().max(uncertified.steps.len());
    (0..n)
        .map(|i| {
            let a = certified.steps.get(i);
            let b = uncertified.steps.get(i);
            let t = a.or(b).map(|s| s.t).expect("index below the longer length");
            if let (Some(a), Some(b)) = (a, b) {
                if a.t != b.t {
                    return Err(Error::shape("bound series time grid", a.t, b.t));
                }
            }
            Ok(BoundSeriesRow {
                t,
                p1_certified: a.map(|s| s.p1_norm),
                p1_uncertified: b.map(|s| s.p1_norm),
                bound: a.map(|s| s.p1_bound),
            })
        })
        .collect()
}

/// Report CSV: [`REPORT_HEADER`], one row per step, scalar output only.
pub fn write_report_csv<W: Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for (k, s) in report.steps.iter().enumerate() {
        if s.y_hat.len() != 1 {
            return Err(Error::shape("report row", 1, s.y_hat.len()));
        }
        let row = [
            s.t,
            s.y_true[0],
            s.y_hat[0],
            s.e1[0],
            s.gamma[0],
            s.gamma_hat[0],
            s.p1_norm,
            s.p1_bound,
            s.z2_hat[0],
        ];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "report row", step: k });
        }
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io("<report csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub t: f64,
    pub y_true: f64,
    pub y_hat: f64,
    pub e1: f64,
    pub gamma: f64,
    pub gamma_hat: f64,
    pub p1_norm: f64,
    pub p1_bound: f64,
    pub z2_hat: f64,
}

pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != REPORT_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(ReportRow {
            t: v[0],
            y_true: v[1],
            y_hat: v[2],
            e1: v[3],
            gamma: v[4],
            gamma_hat: v[5],
            p1_norm: v[6],
            p1_bound: v[7],
            z2_hat: v[8],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(case: CaseId) -> (ScenarioConfig, Checkpoint) {
        let mut cfg = ScenarioConfig::preset(case);
        cfg.t_online = 2.0;
        cfg.trailing_window = 1.0;
        let mut net = Mlp::he_init(&cfg.net_shape, 3).unwrap();
        crate::specnorm::spectral_normalize(&mut net, &cfg.spec_norm().unwrap()).unwrap();
        let ck = Checkpoint::new(&net, cfg.gamma, 3, 0);
        (cfg, ck)
    }

    #[test]
    fn row_count_includes_start() {
        assert_eq!(online_rows(30.0, 0.01), 3001);
        let (cfg, ck) = quick(CaseId::CaseI);
        let report = run_online(&cfg, &ck).unwrap();
        assert_eq!(report.steps.len(), 201);
        assert_eq!(report.steps[0].t, 0.0);
        assert!((report.steps[200].t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn case1_has_no_perturbation_columns() {
        let (cfg, ck) = quick(CaseId::CaseI);
        let report = run_online(&cfg, &ck).unwrap();
        assert!(report.steps.iter().all(|s| s.p1_norm == 0.0 && s.p1_bound == 0.0 && s.gamma == s.gamma_hat));
        assert!(verify_bounds(&report, &ck).passed);
    }

    #[test]
    fn frozen_gains_match_static_error() {
        let (mut cfg, ck) = quick(CaseId::CaseI);
        cfg.gains = None;
        cfg.eps_real = cfg.eps_nominal;
        let report = run_online(&cfg, &ck).unwrap();
        let stat = static_error(&ck.network().unwrap(), &cfg).unwrap();
        for (s, e) in report.steps.iter().zip(&stat) {
            assert_eq!(s.e1[0], *e);
        }
        assert_eq!(report.steps[0].z2_hat, report.steps.last().unwrap().z2_hat);
    }

    #[test]
    fn case2a_frozen_obeys_bound() {
        // with W_L fixed the trained certificate applies at every step
        let (mut cfg, ck) = quick(CaseId::CaseIIa);
        cfg.gains = None;
        let report = run_online(&cfg, &ck).unwrap();
        let verdict = verify_bounds(&report, &ck);
        assert!(verdict.passed, "{verdict:?}");
        assert!(verdict.certified);
        assert!(report.steps.iter().any(|s| s.p1_norm > 0.0));
    }

    #[test]
    fn runaway_adaptation_stops_the_run() {
        // ŷ = 1000 − 100z: the fed-back ẋ₁ = ŷ makes e1 grow like e^{100t}
        use crate::linalg::Matrix;
        use crate::mlp::Layer;
        let (mut cfg, _) = quick(CaseId::CaseIIb);
        cfg.net_shape = vec![2, 1, 1];
        let net = Mlp::new(vec![
            Layer::new(Matrix::from_vec(1, 2, vec![-10.0, 0.0]).unwrap(), Vector::from([100.0])).unwrap(),
            Layer::new(Matrix::from_vec(1, 1, vec![10.0]).unwrap(), Vector::from([0.0])).unwrap(),
        ])
        .unwrap();
        let ck = Checkpoint::new(&net, None, 0, 0);
        let report = run_online(&cfg, &ck).unwrap();
        let t = report.summary.diverged_at.expect("diverges");
        assert!(report.steps.len() < online_rows(cfg.t_online, cfg.dt));
        assert_eq!(report.steps.last().unwrap().t + cfg.dt, t);
        assert!(report.steps.iter().all(|s| s.y_hat[0].abs() <= DIVERGENCE_LIMIT));
        assert_eq!(report.summary.trailing_max_abs_e1, f64::INFINITY);

        let (cfg_a, ck_a) = quick(CaseId::CaseIIa);
        let healthy = run_online(&cfg_a, &ck_a).unwrap();
        let rows = bound_series(&healthy, &report).unwrap();
        assert_eq!(rows.len(), healthy.steps.len());
        assert!(rows[report.steps.len()].p1_uncertified.is_none());
        assert!(rows.iter().all(|r| r.p1_certified.is_some() && r.bound.is_some()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (cfg, _) = quick(CaseId::CaseI);
        let other = Checkpoint::new(&Mlp::he_init(&[2, 4, 1], 0).unwrap(), Some(32.0), 0, 0);
        assert!(matches!(run_online(&cfg, &other), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn report_csv_round_trip() {
        let (cfg, ck) = quick(CaseId::CaseIIa);
        let report = run_online(&cfg, &ck).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y_true,y_hat,e1,gamma,gamma_hat,p1_norm,p1_bound,z2_hat\n"));
        let rows = read_report_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), report.steps.len());
        for (r, s) in rows.iter().zip(&report.steps) {
            assert_eq!(r.y_hat, s.y_hat[0]);
            assert_eq!(r.p1_norm, s.p1_norm);
            assert_eq!(r.e1, r.y_hat - r.y_true);
        }
    }
}
