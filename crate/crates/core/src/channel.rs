//! Rician uplink: SNR model, minimum transmit power for the latency-outage
//! constraint, and a Monte Carlo check of that power.
//!
//! SNR is `γ = Γ p 𝒢 / (d^α W N₀)` with unit-mean Rician fading power `𝒢`.
//! A packet of `D` bits misses the deadline `τ_max` when
//! `W log₂(1 + γ) < D / τ_max`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Γ, frequency and antenna dependent constant.
    pub system_gain: f64,
    pub path_loss_exponent: f64,
    pub bandwidth_hz: f64,
    /// Total noise power over the band.
    pub noise_power_dbm: f64,
    pub rician_factor_db: f64,
    pub outage_probability: f64,
    pub max_latency_s: f64,
    pub packet_bits: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            system_gain: 1.0,
            path_loss_exponent: 2.0,
            bandwidth_hz: 5e6,
            noise_power_dbm: -11.5,
            rician_factor_db: 15.0,
            outage_probability: 1e-5,
            max_latency_s: 5e-3,
            packet_bits: 1024.0,
        }
    }
}

impl ChannelParams {
    pub fn rician_factor(&self) -> f64 {
        db_to_linear(self.rician_factor_db)
    }

    /// `W N₀` in watts.
    pub fn noise_power_w(&self) -> f64 {
        dbm_to_watts(self.noise_power_dbm)
    }

    /// `N₀` in W/Hz.
    pub fn noise_density(&self) -> f64 {
        self.noise_power_w() / self.bandwidth_hz
    }

    /// SNR that exactly carries `D` bits in `τ_max`: `2^{D/(τ_max W)} - 1`.
    pub fn snr_threshold(&self) -> f64 {
        (self.packet_bits / (self.max_latency_s * self.bandwidth_hz)).exp2() - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("system gain", self.system_gain),
            ("path-loss exponent", self.path_loss_exponent),
            ("bandwidth", self.bandwidth_hz),
            ("max latency", self.max_latency_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("channel {name} must be positive")));
            }
        }
        if !(self.packet_bits >= 0.0) {
            return Err(Error::Config("packet size must be non-negative".into()));
        }
        if !(self.outage_probability > 0.0 && self.outage_probability < 0.5) {
            return Err(Error::Config("outage probability must lie in (0, 0.5)".into()));
        }
        if !self.noise_power_dbm.is_finite() || !self.rician_factor_db.is_finite() {
            return Err(Error::Config("noise power and Rician factor must be finite".into()));
        }
        Ok(())
    }
}

/// Standard normal tail `Q(z) = P[N(0,1) > z]`.
pub fn gaussian_q(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Rational approximation of the lower normal quantile (about 1e-9 relative).
fn normal_quantile_rational(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Inverse Gaussian Q-function: `z` with `Q(z) = ε`.
///
/// Rational starting point refined by Newton steps on `Q(z) - ε`.
pub fn inverse_gaussian_q<T: Real>(eps: T) -> Result<T> {
    let e = eps.f64();
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::invalid(format!(
            "inverse Q-function needs a probability in (0, 1), got {e}"
        )));
    }
    if e == 0.5 {
        return Ok(T::zero());
    }
    let mut z = -normal_quantile_rational(e);
    for _ in 0..2 {
        let pdf = standard_normal_pdf(z);
        if pdf == 0.0 {
            break;
        }
        z += (gaussian_q(z) - e) / pdf;
    }
    Ok(T::lit(z))
}

/// Strong-LoS approximation of the inverse Marcum-Q threshold:
/// `y = √(2G) + ln(√(2G) / (√(2G) - q)) / (2q) - q`, `q = Q⁻¹(ε)`.
pub fn y_q<T: Real>(rician_factor: T, eps: T) -> Result<T> {
    let q = inverse_gaussian_q(eps)?;
    if q == T::zero() {
        return Err(Error::Domain("Q⁻¹(ε) = 0; the approximation divides by zero".into()));
    }
    let los = (T::lit(2.0) * rician_factor).sqrt();
    if !(los > q) {
        return Err(Error::Domain(format!(
            "weak line of sight: √(2G) = {:.4} does not exceed Q⁻¹(ε) = {:.4}",
            los.f64(),
            q.f64()
        )));
    }
    Ok(los + (los / (los - q)).ln() / (T::lit(2.0) * q) - q)
}

/// Minimum power meeting the outage constraint at distance `d`:
/// `p* = 2 W N₀ (1+G) (2^{D/(τ_max W)} - 1) d^α / (y_Q² Γ)`.
pub fn required_power<T: Real>(distance: T, params: &ChannelParams) -> Result<T> {
    if !(distance > T::zero()) {
        return Err(Error::invalid("distance must be positive"));
    }
    let g = T::lit(params.rician_factor());
    let y = y_q(g, T::lit(params.outage_probability))?;
    let numerator = T::lit(2.0 * params.noise_power_w()) * (T::one() + g) * T::lit(params.snr_threshold());
    let path_loss = distance.powf(T::lit(params.path_loss_exponent));
    Ok(numerator * path_loss / (y * y * T::lit(params.system_gain)))
}

/// Instantaneous SNR for power `p`, distance `d` and fading power `gain`.
pub fn snr<T: Real>(power: T, distance: T, gain: T, params: &ChannelParams) -> T {
    let path_loss = distance.powf(T::lit(params.path_loss_exponent));
    T::lit(params.system_gain) * power * gain / (path_loss * T::lit(params.noise_power_w()))
}

/// Shannon rate `W log₂(1 + γ)` in bit/s.
pub fn shannon_rate<T: Real>(snr: T, params: &ChannelParams) -> T {
    T::lit(params.bandwidth_hz) * (T::one() + snr).log2()
}

/// Draws `𝒢 = |h|²` with `h = √(G/(G+1)) + CN(0, 1/(G+1))`; `E[𝒢] = 1`.
pub fn sample_rician_gain<T: Real, R: Rng + ?Sized>(rician_factor: T, rng: &mut R) -> T {
    let g = rician_factor.f64();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    if g.is_infinite() {
        return T::one();
    }
    let los = (g / (g + 1.0)).sqrt();
    let scatter = (0.5 / (g + 1.0)).sqrt();
    let x = los + scatter * re;
    let y = scatter * im;
    T::lit(x * x + y * y)
}

/// Trials per independent random stream in [`outage_probability_mc`].
pub const OUTAGE_CHUNK: u64 = 1 << 16;

/// Fraction of fading draws for which the link misses its deadline.
///
/// Trials are split into chunks of [`OUTAGE_CHUNK`], each with its own
/// ChaCha stream derived from `seed`, and summed. The result does not depend
/// on the number of worker threads.
pub fn outage_probability_mc(power: f64, distance: f64, params: &ChannelParams, trials: u64, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let g = params.rician_factor();
    let threshold = params.snr_threshold();
    let chunks = trials.div_ceil(OUTAGE_CHUNK);
    let outages: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let n = OUTAGE_CHUNK.min(trials - c * OUTAGE_CHUNK);
            (0..n)
                .filter(|_| {
                    let gain: f64 = sample_rician_gain(g, &mut rng);
                    snr(power, distance, gain, params) < threshold
                })
                .count() as u64
        })
        .sum();
    Ok(outages as f64 / trials as f64)
}

fn ln_factorial(n: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

/// `P[χ²_{2n} ≤ 2y]` for integer `n ≥ 1`, i.e. the regularized lower
/// incomplete gamma `P(n, y)`, summed without cancellation.
fn chi2_even_cdf(n: u64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let log_term = |i: u64| -y + i as f64 * y.ln() - ln_factorial(i);
    if (n as f64) > y {
        // tail Σ_{i≥n} e^{-y} y^i / i!
        let mut term = log_term(n).exp();
        let mut sum = term;
        let mut i = n;
        while term > sum * 1e-17 {
            i += 1;
            term *= y / i as f64;
            sum += term;
        }
        sum.min(1.0)
    } else {
        let head: f64 = (0..n).map(|i| log_term(i).exp()).sum();
        (1.0 - head).max(0.0)
    }
}

/// `1 - Q₁(a, b)`: probability that a Rician envelope with LoS amplitude `a`
/// (unit-variance quadratures) is at most `b`.
pub fn rician_envelope_cdf(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    let mu = 0.5 * a * a;
    let y = 0.5 * b * b;
    if mu == 0.0 {
        return chi2_even_cdf(1, y);
    }
    let j_max = (mu + 40.0 * mu.sqrt() + 100.0) as u64;
    let mut total = 0.0;
    for j in 0..=j_max {
        let w = (-mu + j as f64 * mu.ln() - ln_factorial(j)).exp();
        if w == 0.0 && (j as f64) > mu {
            break;
        }
        total += w * chi2_even_cdf(j + 1, y);
    }
    total.min(1.0)
}

/// First-order Marcum Q-function `Q₁(a, b)`.
pub fn marcum_q1(a: f64, b: f64) -> f64 {
    1.0 - rician_envelope_cdf(a, b)
}

/// Exact threshold `y` with `1 - Q₁(√(2G), y) = ε`, by bisection.
pub fn y_exact(rician_factor: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("outage probability must lie in (0, 1)"));
    }
    let a = (2.0 * rician_factor).sqrt();
    let (mut lo, mut hi) = (0.0, a + 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rician_envelope_cdf(a, mid) < eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
