//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reverb::agent::{gaussian_log_prob, ActorCritic, Mlp, OutputActivation};
use reverb::dynamics::{LinearPlant, Plant, StateVector};
use reverb::estimator::{self, Belief};
use reverb::scheduler::{schedule, QosThresholds};
use reverb::sensing::{Fleet, SensingAgentSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Random symmetric positive-definite matrix with entries on `scale`.
pub fn random_spd<R: Rng>(n: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    m * scale
}

fn log_uniform<R: Rng>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

// ---------------------------------------------------------------------------
// Filtering oracle

pub struct OracleRun {
    pub max_mean_error: f64,
    pub max_cov_error: f64,
    pub steps: usize,
}

/// Runs the EKF on a 2-state linear-Gaussian system for `steps` QIs and
/// compares every posterior with the batch Bayesian least-squares solution
/// over the whole trajectory `s_0..s_t`.
pub fn filter_vs_batch(steps: usize, seed: u64) -> OracleRun {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.95]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
    let q = DMatrix::from_row_slice(2, 2, &[1e-3, 2e-4, 2e-4, 5e-4]);
    let plant = LinearPlant::new(a.clone(), b.clone(), q.clone()).unwrap();
    let mixed = SensingAgentSpec::new(
        0,
        DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        DMatrix::from_element(1, 1, 0.04),
        5.0,
    )
    .unwrap();
    let vel = SensingAgentSpec::scalar(1, 1, 2, 0.01, 3.0).unwrap();
    let agents = [&mixed, &vel];
    let stacked = estimator::stack(&agents).unwrap();
    let h = stacked.observation_matrix().clone();
    let r = stacked.noise_cov().clone();

    let m0 = DVector::from_vec(vec![0.5, -0.2]);
    let p0 = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.05]);
    let controls: Vec<f64> = (0..steps).map(|t| (0.3 * t as f64).sin()).collect();

    let mut rng = rng(seed);
    let mut truth = StateVector::new(&m0 + p0.clone().cholesky().unwrap().l() * DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let mut ys = Vec::new();
    for c in &controls {
        truth = plant.step(&truth, &[*c], &mut rng).unwrap();
        let obs: Vec<f64> = agents
            .iter()
            .flat_map(|ag| ag.observe(&truth, 0, &mut rng).unwrap().values.iter().copied().collect::<Vec<_>>())
            .collect();
        ys.push(DVector::from_vec(obs));
    }

    let q_inv = q.clone().try_inverse().unwrap();
    let r_inv = r.clone().try_inverse().unwrap();
    let p0_inv = p0.clone().try_inverse().unwrap();

    let mut belief = Belief::new(StateVector::new(m0.clone()), p0.clone(), 0).unwrap();
    let mut run = OracleRun {
        max_mean_error: 0.0,
        max_cov_error: 0.0,
        steps,
    };
    for t in 1..=steps {
        let prior = estimator::predict(&belief, &[controls[t - 1]], &plant).unwrap();
        belief = estimator::update(&prior, &stacked, &ys[t - 1]).unwrap();

        // Information form over x = (s_0, ..., s_t).
        let n = 2 * (t + 1);
        let mut info = DMatrix::<f64>::zeros(n, n);
        let mut vec = DVector::<f64>::zeros(n);
        info.view_mut((0, 0), (2, 2)).copy_from(&p0_inv);
        vec.rows_mut(0, 2).copy_from(&(&p0_inv * &m0));
        for tau in 1..=t {
            // residual s_τ - A s_{τ-1} - B a_{τ-1} ~ N(0, Q)
            let mut d = DMatrix::<f64>::zeros(2, n);
            d.view_mut((0, 2 * (tau - 1)), (2, 2)).copy_from(&(-&a));
            d.view_mut((0, 2 * tau), (2, 2)).copy_from(&DMatrix::identity(2, 2));
            let bu = &b * DVector::from_element(1, controls[tau - 1]);
            info += d.transpose() * &q_inv * &d;
            vec += d.transpose() * &q_inv * bu;
            let mut e = DMatrix::<f64>::zeros(2, n);
            e.view_mut((0, 2 * tau), (2, 2)).copy_from(&DMatrix::identity(2, 2));
            let he = &h * &e;
            info += he.transpose() * &r_inv * &he;
            vec += he.transpose() * &r_inv * &ys[tau - 1];
        }
        let cov_all = info.clone().try_inverse().unwrap();
        let mean_all = &cov_all * vec;
        let mean = mean_all.rows(2 * t, 2).into_owned();
        let cov = cov_all.view((2 * t, 2 * t), (2, 2)).into_owned();

        run.max_mean_error = run
            .max_mean_error
            .max(rel_err_vec(belief.mean().as_vector(), &mean));
        run.max_cov_error = run.max_cov_error.max(rel_err_mat(belief.cov(), &cov));
    }
    run
}

// ---------------------------------------------------------------------------
// Scheduler properties

pub struct Instance {
    pub prior: Belief<f64>,
    pub thresholds: QosThresholds<f64>,
    pub fleet: Fleet<f64>,
    pub capacity: usize,
}

/// A random scheduling instance. `diagonal` restricts it to a diagonal prior
/// and single-feature agents.
pub fn random_instance<R: Rng>(rng: &mut R, diagonal: bool, max_agents: usize, max_capacity: usize) -> Instance {
    let dim = if diagonal { 2 } else { rng.random_range(1..=3) };
    let cov = if diagonal {
        DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| log_uniform(1e-4, 1.0, rng)))
    } else {
        random_spd(dim, log_uniform(1e-4, 1.0, rng), rng)
    };
    let mean = StateVector::new(DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)));
    let prior = Belief::new(mean, cov, 0).unwrap();
    let caps: Vec<f64> = (0..dim).map(|_| log_uniform(1e-4, 1.0, rng)).collect();
    let requested: Vec<f64> = (0..dim)
        .map(|_| if rng.random_bool(0.5) { 0.0 } else { log_uniform(1.0, 1e4, rng) })
        .collect();
    let thresholds = QosThresholds::new(caps, requested).unwrap();
    let count = rng.random_range(1..=max_agents);
    let agents = (0..count)
        .map(|i| {
            let id = i as u32 * 3 + 1;
            let distance = rng.random_range(1.0..20.0);
            if diagonal || rng.random_bool(0.7) {
                let feature = if i < dim { i } else { rng.random_range(0..dim) };
                SensingAgentSpec::scalar(id, feature, dim, log_uniform(1e-4, 1.0, rng), distance).unwrap()
            } else {
                let rows = rng.random_range(1..=dim);
                let h = DMatrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0));
                SensingAgentSpec::new(id, h, random_spd(rows, log_uniform(1e-3, 1.0, rng), rng), distance).unwrap()
            }
        })
        .collect();
    Instance {
        prior,
        thresholds,
        fleet: Fleet::new(agents).unwrap(),
        capacity: rng.random_range(0..=max_capacity),
    }
}

/// Posterior covariance by the information form `(Ψ⁻¹ + Σ Hᵀ R⁻¹ H)⁻¹`.
pub fn information_posterior(prior: &DMatrix<f64>, agents: &[&SensingAgentSpec<f64>]) -> DMatrix<f64> {
    let mut info = prior.clone().try_inverse().unwrap();
    for a in agents {
        let h = a.observation_matrix();
        info += h.transpose() * a.noise_cov().clone().try_inverse().unwrap() * h;
    }
    info.try_inverse().unwrap()
}

fn error_level(a: &SensingAgentSpec<f64>) -> f64 {
    a.noise_cov().trace()
}

/// Algorithm-level greedy selection written from its definition.
pub fn reference_greedy(inst: &Instance) -> Vec<u32> {
    let caps = inst.thresholds.effective();
    let dim = caps.len();
    let ok = |cov: &DMatrix<f64>| (0..dim).all(|k| cov[(k, k)] <= caps[k]);
    let mut cov = inst.prior.cov().clone();
    let mut chosen: Vec<&SensingAgentSpec<f64>> = Vec::new();
    if ok(&cov) {
        return Vec::new();
    }
    while chosen.len() < inst.capacity && !ok(&cov) {
        let avail: Vec<_> = inst
            .fleet
            .agents()
            .iter()
            .filter(|a| !chosen.iter().any(|c| c.id() == a.id()))
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for k in 0..dim {
            if !avail.iter().any(|a| a.observation_matrix().column(k).iter().any(|v| *v != 0.0)) {
                continue;
            }
            let r = cov[(k, k)] / caps[k];
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((k, r));
            }
        }
        let Some((k, _)) = best else { break };
        let pick = avail
            .into_iter()
            .filter(|a| a.observation_matrix().column(k).iter().any(|v| *v != 0.0))
            .min_by(|a, b| error_level(a).total_cmp(&error_level(b)).then(a.id().cmp(&b.id())))
            .unwrap();
        chosen.push(pick);
        cov = information_posterior(inst.prior.cov(), &chosen);
    }
    chosen.iter().map(|a| a.id()).collect()
}

/// True when some subset of at most `capacity` agents meets every threshold.
pub fn brute_force_feasible(inst: &Instance) -> bool {
    let agents = inst.fleet.agents();
    let caps = inst.thresholds.effective();
    (0u32..1 << agents.len())
        .filter(|mask| mask.count_ones() as usize <= inst.capacity)
        .any(|mask| {
            let subset: Vec<_> = (0..agents.len()).filter(|i| mask & (1 << i) != 0).map(|i| &agents[i]).collect();
            let cov = if subset.is_empty() {
                inst.prior.cov().clone()
            } else {
                information_posterior(inst.prior.cov(), &subset)
            };
            (0..caps.len()).all(|k| cov[(k, k)] <= caps[k])
        })
}

/// Checks one instance; returns a description of every violated property.
pub fn check_schedule(inst: &Instance) -> Vec<String> {
    let mut out = Vec::new();
    let d = match schedule(&inst.prior, &inst.thresholds, &inst.fleet, inst.capacity) {
        Ok(d) => d,
        Err(e) => return vec![format!("schedule failed: {e}")],
    };
    let caps = inst.thresholds.effective();
    let prior = inst.prior.cov();
    let pre_ok = (0..caps.len()).all(|k| prior[(k, k)] <= caps[k]);

    if d.iterations > inst.capacity || d.selected.len() > inst.capacity {
        out.push(format!("capacity {} exceeded: {:?}", inst.capacity, d.selected));
    }
    if d.iterations != d.selected.len() {
        out.push("iteration count differs from selection size".into());
    }
    let mut ids = d.selected.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != d.selected.len() || d.selected.iter().any(|id| inst.fleet.get(*id).is_none()) {
        out.push(format!("selection not unique fleet ids: {:?}", d.selected));
    }
    if pre_ok != d.selected.is_empty() && (pre_ok || inst.capacity > 0) {
        out.push(format!("empty-set branch wrong: pre-satisfied={pre_ok}, selected {:?}", d.selected));
    }
    if pre_ok && d.posterior.cov() != prior {
        out.push("blind path changed the covariance".into());
    }
    let post = d.posterior.cov();
    for k in 0..caps.len() {
        if post[(k, k)] > prior[(k, k)] * (1.0 + 1e-12) + 1e-18 {
            out.push(format!("posterior variance {k} grew: {} > {}", post[(k, k)], prior[(k, k)]));
        }
        if d.satisfied[k] != (post[(k, k)] <= caps[k]) {
            out.push(format!("satisfied flag {k} inconsistent"));
        }
    }
    let min_eig = post.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-10 || (post - post.transpose()).abs().max() > 0.0 {
        out.push(format!("posterior not symmetric PSD (min eigenvalue {min_eig:e})"));
    }
    if !d.selected.is_empty() {
        let agents: Vec<_> = d.selected.iter().map(|id| inst.fleet.get(*id).unwrap()).collect();
        let oracle = information_posterior(prior, &agents);
        if rel_err_mat(post, &oracle) > 1e-8 {
            out.push("posterior differs from the information form".into());
        }
        // The feature chosen at each step must shrink strictly.
        let mut cov = prior.clone();
        for i in 0..agents.len() {
            let next = information_posterior(prior, &agents[..=i]);
            let shrank = (0..caps.len()).any(|k| agents[i].measures(k) && next[(k, k)] < cov[(k, k)]);
            if !shrank {
                out.push(format!("step {i} did not reduce any measured variance"));
            }
            cov = next;
        }
    }
    let reference = reference_greedy(inst);
    if reference != d.selected {
        out.push(format!("greedy order {:?} differs from reference {:?}", d.selected, reference));
    }
    out
}

pub struct SchedulerRun {
    pub instances: usize,
    pub brute_force_instances: usize,
    pub failures: Vec<String>,
}

/// Random general instances plus small diagonal instances compared with
/// exhaustive search.
pub fn scheduler_properties(instances: usize, seed: u64) -> SchedulerRun {
    let mut rng = rng(seed);
    let mut run = SchedulerRun {
        instances,
        brute_force_instances: 0,
        failures: Vec::new(),
    };
    for i in 0..instances {
        let small = i % 4 == 0;
        let inst = if small {
            random_instance(&mut rng, true, 6, 3)
        } else {
            random_instance(&mut rng, false, 8, 5)
        };
        for f in check_schedule(&inst) {
            run.failures.push(format!("instance {i}: {f}"));
        }
        if small {
            run.brute_force_instances += 1;
            let d = schedule(&inst.prior, &inst.thresholds, &inst.fleet, inst.capacity).unwrap();
            if brute_force_feasible(&inst) && d.satisfied.iter().any(|s| !s) {
                run.failures.push(format!("instance {i}: feasible by brute force but greedy missed it"));
            }
        }
    }
    run
}

// ---------------------------------------------------------------------------
// Network gradients

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn policy_log_prob(model: &ActorCritic<f64>, x: &[f64], action: &[f64]) -> f64 {
    let mean = model.actor.forward(x).unwrap();
    gaussian_log_prob(action, &mean, &model.log_std)
}

pub struct GradientCheck {
    pub actor: f64,
    pub log_std: f64,
    pub critic: f64,
}

/// Backpropagated gradients of the policy log-density and the value against
/// central differences on `networks` random small networks. Returns the
/// worst relative error for each parameter group.
pub fn gradient_checks(networks: usize, seed: u64) -> GradientCheck {
    let mut rng = rng(seed);
    let h = 1e-6;
    let mut worst = GradientCheck {
        actor: 0.0,
        log_std: 0.0,
        critic: 0.0,
    };
    for _ in 0..networks {
        let input = rng.random_range(2..=5);
        let action = rng.random_range(1..=3);
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=8)).collect();
        let mut model = ActorCritic::<f64>::random(input, action, &hidden, rng.random_range(-1.0..0.5), &mut rng).unwrap();
        // Unit output gain so the tanh layer is exercised away from zero.
        let sizes = model.actor.sizes().to_vec();
        model.actor = Mlp::random(&sizes, OutputActivation::Tanh, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a: Vec<f64> = (0..action).map(|_| rng.random_range(-1.5..1.5)).collect();

        let acts = model.actor.forward_trace(&x).unwrap();
        let mean = acts.last().unwrap().clone();
        let dmean: Vec<f64> = (0..action)
            .map(|i| (a[i] - mean[i]) / (2.0 * model.log_std[i]).exp())
            .collect();
        let mut g_actor = vec![0.0; model.actor.params().len()];
        model.actor.backward(&acts, &dmean, &mut g_actor);
        let g_log_std: Vec<f64> = (0..action)
            .map(|i| ((a[i] - mean[i]) / model.log_std[i].exp()).powi(2) - 1.0)
            .collect();
        let vacts = model.critic.forward_trace(&x).unwrap();
        let mut g_critic = vec![0.0; model.critic.params().len()];
        model.critic.backward(&vacts, &[1.0], &mut g_critic);

        let mut n_actor = Vec::new();
        for j in 0..g_actor.len() {
            let mut m = model.clone();
            m.actor.params_mut()[j] += h;
            let up = policy_log_prob(&m, &x, &a);
            m.actor.params_mut()[j] -= 2.0 * h;
            n_actor.push((up - policy_log_prob(&m, &x, &a)) / (2.0 * h));
        }
        let mut n_log_std = Vec::new();
        for j in 0..action {
            let mut m = model.clone();
            m.log_std[j] += h;
            let up = policy_log_prob(&m, &x, &a);
            m.log_std[j] -= 2.0 * h;
            n_log_std.push((up - policy_log_prob(&m, &x, &a)) / (2.0 * h));
        }
        let mut n_critic = Vec::new();
        for j in 0..g_critic.len() {
            let mut m = model.clone();
            m.critic.params_mut()[j] += h;
            let up = m.value(&x).unwrap();
            m.critic.params_mut()[j] -= 2.0 * h;
            n_critic.push((up - m.value(&x).unwrap()) / (2.0 * h));
        }
        worst.actor = worst.actor.max(relative(&g_actor, &n_actor));
        worst.log_std = worst.log_std.max(relative(&g_log_std, &n_log_std));
        worst.critic = worst.critic.max(relative(&g_critic, &n_critic));
    }
    worst
}

// ---------------------------------------------------------------------------
// Rician envelope

/// `ln I₀(z)` from the power series `Σ ((z/2)^k / k!)²`.
fn ln_bessel_i0(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 1.0;
    while !(term < sum * 1e-18 && k > 0.5 * z) {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum.ln()
}

/// `1 - Q₁(a, b)`, the Rician envelope CDF, by composite Simpson quadrature
/// of `x exp(-(x² + a²)/2) I₀(a x)` on `[0, b]`.
pub fn rician_cdf_quadrature(a: f64, b: f64) -> f64 {
    let n = 4000;
    let hstep = b / n as f64;
    let f = |x: f64| {
        if x == 0.0 {
            0.0
        } else {
            (x.ln() - 0.5 * (x * x + a * a) + ln_bessel_i0(a * x)).exp()
        }
    };
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * hstep);
    }
    s * hstep / 3.0
}

/// Solves `1 - Q₁(√(2G), y) = ε` for `y` by bisection on the quadrature CDF.
pub fn y_oracle(rician_factor: f64, eps: f64) -> f64 {
    let a = (2.0 * rician_factor).sqrt();
    let (mut lo, mut hi) = (0.0, a + 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if rician_cdf_quadrature(a, mid) < eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
