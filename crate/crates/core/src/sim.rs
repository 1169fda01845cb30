//! Seeded Monte Carlo closed-loop and autonomous simulation.
//!
//! Reproducibility contract: every run draws from its own counter-derived
//! ChaCha stream keyed by `(master_seed, run_index)`, so ensembles are
//! bit-identical regardless of execution order or thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{cholesky, sqrt_psd, Matrix, SymmetricMatrix};
use crate::model::{step, LtiSystem, ModelError, NoiseModel, Polytope};
use crate::mpc::{MpcProblemData, MpcStatus, MpcWarmStart};
use crate::policy::{self, Branch, PolicyError};
use crate::qp::Feasibility;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Independent per-run random stream derived from the master seed and the
/// run index.
pub fn run_rng(master_seed: u64, run_index: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&run_index.to_le_bytes());
    // fixed domain tag so other derivations cannot collide with run streams
    seed[16..20].copy_from_slice(&[0x73, 0x6d, 0x70, 0x63]);
    ChaCha12Rng::from_seed(seed)
}

/// Draws `w = L xi` with `L` a factor of the noise covariance and `xi`
/// standard normal. Falls back to the symmetric PSD square root when the
/// covariance is singular.
pub struct GaussianSampler {
    factor: Matrix,
}

impl GaussianSampler {
    pub fn new(noise: &NoiseModel) -> Result<Self, SimError> {
        let factor = match cholesky(noise.sigma_w()) {
            Ok(l) => l,
            Err(_) => sqrt_psd(noise.sigma_w())
                .map_err(|e| SimError::InvalidConfig(format!("noise covariance: {e}")))?
                .as_matrix()
                .clone(),
        };
        Ok(GaussianSampler { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        self.factor.matvec(&xi)
    }
}

/// One noise draw with covariance `sigma_w` from the given stream.
pub fn sample_gaussian<R: Rng>(noise: &NoiseModel, rng: &mut R) -> Result<Vec<f64>, SimError> {
    Ok(GaussianSampler::new(noise)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    Autonomous,
    MpcCombined,
}

#[derive(Debug, Clone)]
pub enum InitialStates {
    /// Same initial state for every run.
    Single(Vec<f64>),
    /// One initial state per run (length must equal `n_runs`).
    List(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub mode: SimMode,
    pub n_runs: usize,
    pub steps: usize,
    pub master_seed: u64,
    pub initial_states: InitialStates,
}

impl SimConfig {
    fn initial_state(&self, run: usize) -> &[f64] {
        match &self.initial_states {
            InitialStates::Single(x) => x,
            InitialStates::List(xs) => &xs[run],
        }
    }

    fn validate(&self, n_states: usize) -> Result<(), SimError> {
        if self.n_runs < 1 || self.steps < 1 {
            return Err(SimError::InvalidConfig(
                "n_runs and steps must both be at least 1".to_string(),
            ));
        }
        match &self.initial_states {
            InitialStates::Single(x) if x.len() != n_states => Err(SimError::InvalidConfig(
                format!("initial state has length {}, expected {n_states}", x.len()),
            )),
            InitialStates::List(xs) => {
                if xs.len() != self.n_runs {
                    return Err(SimError::InvalidConfig(format!(
                        "{} initial states for {} runs",
                        xs.len(),
                        self.n_runs
                    )));
                }
                if xs.iter().any(|x| x.len() != n_states) {
                    return Err(SimError::InvalidConfig(
                        "initial state dimension mismatch".to_string(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Control law applied in closed loop: the zero-input back-up law, or the
/// combined MPC/back-up policy.
#[derive(Clone, Copy)]
pub enum Controller<'a> {
    Zero,
    Combined(&'a MpcProblemData),
}

/// What to record beyond states and inputs.
#[derive(Clone, Copy, Default)]
pub struct RecordOptions<'a> {
    /// Quadratic Lyapunov weight for the `V(x) = x'Px` trace.
    pub lyapunov: Option<&'a SymmetricMatrix>,
    /// Evaluate feasible-set membership along zero-input runs (combined
    /// runs get verdicts from the controller itself).
    pub monitor: Option<&'a MpcProblemData>,
    /// Record the extended Lyapunov candidate along combined runs. Steps
    /// outside the feasible set trigger a boundary-scaling bisection.
    pub candidate: bool,
}

/// Everything observed along one closed-loop run. `states` has
/// `steps + 1` entries; `inputs` and `branches` have `steps`.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
    pub lyapunov: Option<Vec<f64>>,
    pub candidate: Option<Vec<f64>>,
    pub feasible: Option<Vec<Feasibility>>,
    pub violations: Vec<bool>,
}

fn feasibility_of(data: &MpcProblemData, x: &[f64]) -> Feasibility {
    policy::in_feasible_set(data, x)
}

/// Simulates `steps` steps of `x+ = Ax + Bu + w` under the given
/// controller, recording the full trajectory. Deterministic given the
/// stream state.
pub fn run_closed_loop<R: Rng>(
    sys: &LtiSystem,
    noise: &NoiseModel,
    controller: Controller<'_>,
    state_set: &Polytope,
    x0: &[f64],
    steps: usize,
    rng: &mut R,
    opts: RecordOptions<'_>,
) -> Result<TrajectoryRecord, SimError> {
    let sampler = GaussianSampler::new(noise)?;
    let n_u = sys.n_inputs();
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut branches = Vec::with_capacity(steps);
    let mut lyap = opts.lyapunov.map(|_| Vec::with_capacity(steps + 1));
    let mut feas: Option<Vec<Feasibility>> = match controller {
        Controller::Combined(_) => Some(Vec::with_capacity(steps + 1)),
        Controller::Zero => opts.monitor.map(|_| Vec::with_capacity(steps + 1)),
    };
    let mut cand = opts.candidate.then(|| Vec::with_capacity(steps + 1));
    let mut violations = Vec::with_capacity(steps + 1);

    let mut x = x0.to_vec();
    let mut warm: Option<MpcWarmStart> = None;
    for _ in 0..steps {
        if let (Some(v), Some(p)) = (lyap.as_mut(), opts.lyapunov) {
            v.push(p.quad_form(&x));
        }
        violations.push(!state_set.contains(&x, 0.0));

        let u = match controller {
            Controller::Zero => {
                if let (Some(v), Some(data)) = (feas.as_mut(), opts.monitor) {
                    v.push(feasibility_of(data, &x));
                }
                if let Some(c) = cand.as_mut() {
                    if let Some(data) = opts.monitor {
                        c.push(policy::lyapunov_candidate(data, &x)?);
                    }
                }
                branches.push(Branch::Backup);
                vec![0.0; n_u]
            }
            Controller::Combined(data) => {
                let (decision, solution) =
                    policy::combined_policy_with_start(data, &x, warm.as_ref());
                if let Some(v) = feas.as_mut() {
                    v.push(match decision.branch {
                        Branch::Mpc => Feasibility::Feasible,
                        Branch::Backup => Feasibility::Infeasible,
                        Branch::IndeterminateBackup => Feasibility::Indeterminate,
                    });
                }
                if let Some(c) = cand.as_mut() {
                    match decision.value_nominal {
                        Some(v) => c.push(v),
                        None => c.push(policy::lyapunov_candidate(data, &x)?),
                    }
                }
                warm = solution.as_ref().and_then(|sol| {
                    if sol.status == MpcStatus::Optimal {
                        Some(policy::shifted_warm_start(data, sol))
                    } else {
                        None
                    }
                });
                branches.push(decision.branch);
                decision.input
            }
        };

        let w = sampler.sample(rng);
        let next = step(sys, &x, &u, &w)?;
        states.push(x);
        inputs.push(u);
        x = next;
    }

    // flags for the terminal state
    if let (Some(v), Some(p)) = (lyap.as_mut(), opts.lyapunov) {
        v.push(p.quad_form(&x));
    }
    violations.push(!state_set.contains(&x, 0.0));
    if let Some(v) = feas.as_mut() {
        let data = match controller {
            Controller::Combined(data) => Some(data),
            Controller::Zero => opts.monitor,
        };
        if let Some(data) = data {
            v.push(feasibility_of(data, &x));
        }
    }
    if let Some(c) = cand.as_mut() {
        let data = match controller {
            Controller::Combined(data) => Some(data),
            Controller::Zero => opts.monitor,
        };
        if let Some(data) = data {
            c.push(policy::lyapunov_candidate(data, &x)?);
        }
    }
    states.push(x);

    Ok(TrajectoryRecord {
        states,
        inputs,
        branches,
        lyapunov: lyap,
        candidate: cand,
        feasible: feas,
        violations,
    })
}

/// Runs the configured ensemble. Each run draws from its own
/// `(master_seed, run_index)` stream, so the ensemble is order- and
/// thread-count-independent; records are returned in run-index order.
pub fn monte_carlo(
    cfg: &SimConfig,
    sys: &LtiSystem,
    noise: &NoiseModel,
    controller: Controller<'_>,
    state_set: &Polytope,
    opts: RecordOptions<'_>,
) -> Result<Vec<TrajectoryRecord>, SimError> {
    cfg.validate(sys.n_states())?;
    let runs: Vec<Result<TrajectoryRecord, SimError>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = run_rng(cfg.master_seed, r as u64);
            run_closed_loop(
                sys,
                noise,
                controller,
                state_set,
                cfg.initial_state(r),
                cfg.steps,
                &mut rng,
                opts,
            )
        })
        .collect();
    runs.into_iter().collect()
}

/// Per-step fraction of runs whose state violates the given set.
pub fn violation_stats(records: &[TrajectoryRecord], state_set: &Polytope) -> Vec<f64> {
    assert!(!records.is_empty(), "violation_stats: empty ensemble");
    let steps = records[0].states.len();
    let mut freq = vec![0.0; steps];
    for rec in records {
        assert_eq!(rec.states.len(), steps, "ragged ensemble");
        for (k, x) in rec.states.iter().enumerate() {
            if !state_set.contains(x, 0.0) {
                freq[k] += 1.0;
            }
        }
    }
    let n = records.len() as f64;
    for f in &mut freq {
        *f /= n;
    }
    freq
}
