use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError};
use crate::numcore::{dot, Matrix};
use crate::policy::HeadKind;
use crate::rng::{derive_seed, stream};

/// Sampled actions per archetype when measuring preference alignment.
pub const ALIGNMENT_SAMPLES: usize = 10_000;

const WORLD_STREAM: u64 = 0;
const USER_STREAM: u64 = 1;
const ALIGNMENT_STREAM: u64 = 2;

/// Ground-truth logging behavior of one archetype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub angle_rad: f64,
    pub explore: f64,
    pub temperature: f64,
}

/// Everything shared by all users of one simulator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub preference_basis: Matrix,
    pub popularity: Vec<f64>,
    /// Maps context features into action space; unit Frobenius norm.
    pub context_mix: Matrix,
    /// Unit item embeddings, one per row.
    pub items: Matrix,
    pub archetypes: Vec<Archetype>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub archetype: usize,
    pub preference: Vec<f64>,
    pub loyalty: f64,
    /// Root of this user's random streams.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub world: World,
    pub users: Vec<UserProfile>,
    /// Mean `ã · p` of each archetype's logging policy over sampled states.
    pub archetype_alignment: Vec<f64>,
}

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

fn orthonormal_basis(d: usize, r: usize, rng: &mut impl Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for c in &cols {
            let p = dot(&v, c);
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        if normalize(&mut v) > 1e-6 {
            cols.push(v);
        }
    }
    Matrix::from_fn(d, r, |i, j| cols[j][i])
}

impl World {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, WORLD_STREAM);
        let d = cfg.action_dim;
        let ctx = cfg.state_dim - d;
        let preference_basis = orthonormal_basis(d, cfg.preference_rank, &mut rng);
        let popularity = random_unit(d, &mut rng);
        let mut context_mix = Matrix::from_fn(d, ctx, |_, _| normal(&mut rng));
        let f = context_mix.frobenius_norm();
        context_mix = context_mix.scale(1.0 / f);
        let rows: Vec<Vec<f64>> = (0..cfg.n_items.max(1)).map(|_| random_unit(d, &mut rng)).collect();
        let items = Matrix::from_rows(&rows).expect("item rows share a dimension");
        let archetypes = (0..cfg.k_true)
            .map(|g| {
                let t = cfg.archetype_t(g);
                let lerp = |a: f64, b: f64| a + t * (b - a);
                Archetype {
                    angle_rad: lerp(cfg.angle_best_deg, cfg.angle_worst_deg).to_radians(),
                    explore: lerp(cfg.explore_best, cfg.explore_worst),
                    temperature: lerp(cfg.temperature_best, cfg.temperature_worst),
                }
            })
            .collect();
        Ok(Self {
            preference_basis,
            popularity,
            context_mix,
            items,
            archetypes,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.popularity.len()
    }

    pub fn sample_preference(&self, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.action_dim();
        loop {
            let z: Vec<f64> = (0..self.preference_basis.cols()).map(|_| normal(rng)).collect();
            let mut p: Vec<f64> = (0..d)
                .map(|i| dot(self.preference_basis.row(i), &z) + spread * normal(rng))
                .collect();
            if normalize(&mut p) > 1e-9 {
                return p;
            }
        }
    }

    /// Users `0..n` drawn from the stream rooted at `seed`; ids are `{prefix}{index}`.
    pub fn sample_users(&self, cfg: &SimConfig, n: usize, seed: u64, prefix: &str) -> Vec<UserProfile> {
        let root = derive_seed(seed, USER_STREAM);
        (0..n)
            .map(|i| {
                let user_seed = derive_seed(root, i as u64);
                let mut rng = stream(user_seed, 0);
                let archetype = rng.random_range(0..cfg.k_true);
                let preference = self.sample_preference(cfg.preference_spread, &mut rng);
                let loyalty = cfg.loyalty_sd * normal(&mut rng);
                UserProfile {
                    user_id: format!("{prefix}{i:05}"),
                    archetype,
                    preference,
                    loyalty,
                    seed: user_seed,
                }
            })
            .collect()
    }

    /// Logging direction plus context-driven exploration, before any
    /// normalization: `cos θ p̂ + sin θ q⊥ + explore · M c`, where `p̂` is the
    /// observed preference and `q⊥` the popularity direction orthogonalized
    /// against it.
    pub fn expert_vector(&self, archetype: usize, state: &[f64]) -> Vec<f64> {
        let a = &self.archetypes[archetype];
        let d = self.action_dim();
        let mut p = state[..d].to_vec();
        normalize(&mut p);
        let qp = dot(&self.popularity, &p);
        let mut q: Vec<f64> = self.popularity.iter().zip(&p).map(|(q, p)| q - qp * p).collect();
        if normalize(&mut q) < 1e-9 {
            q = vec![0.0; d];
        }
        let ctx = &state[d..];
        let (c, s) = (a.angle_rad.cos(), a.angle_rad.sin());
        (0..d)
            .map(|i| c * p[i] + s * q[i] + a.explore * dot(self.context_mix.row(i), ctx))
            .collect()
    }

    /// Softmax over item scores `e_i · v / T` for the archetype's vector `v`.
    pub fn expert_distribution(&self, archetype: usize, state: &[f64]) -> Vec<f64> {
        let v = self.expert_vector(archetype, state);
        let t = self.archetypes[archetype].temperature;
        let scores: Vec<f64> = (0..self.items.rows()).map(|i| dot(self.items.row(i), &v) / t).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    /// A state as the environment would emit it for this preference.
    pub fn sample_state(&self, cfg: &SimConfig, preference: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut s: Vec<f64> = preference.iter().map(|p| p + cfg.obs_noise * normal(rng)).collect();
        s.extend((cfg.action_dim..cfg.state_dim).map(|_| normal(rng)));
        s
    }
}

/// Inverse-CDF draw from a discrete distribution; `u` in [0, 1).
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn measure_alignment(world: &World, cfg: &SimConfig) -> Vec<f64> {
    let mut rng = stream(cfg.seed, ALIGNMENT_STREAM);
    (0..cfg.k_true)
        .map(|g| {
            let mut sum = 0.0;
            for _ in 0..ALIGNMENT_SAMPLES {
                let p = world.sample_preference(cfg.preference_spread, &mut rng);
                let s = world.sample_state(cfg, &p, &mut rng);
                let a = match cfg.action_kind {
                    HeadKind::Continuous => world.expert_vector(g, &s),
                    HeadKind::Discrete => {
                        let probs = world.expert_distribution(g, &s);
                        world.items.row(sample_index(&probs, rng.random())).to_vec()
                    }
                };
                let n = dot(&a, &a).sqrt().max(1.0);
                sum += dot(&a, &p) / n;
            }
            sum / ALIGNMENT_SAMPLES as f64
        })
        .collect()
}

/// Seeded world and training population, with each archetype's logging
/// alignment measured by Monte Carlo.
pub fn gen_population(cfg: &SimConfig) -> Result<Population, SimError> {
    let world = World::new(cfg)?;
    let users = world.sample_users(cfg, cfg.n_users, cfg.seed, "u");
    let archetype_alignment = measure_alignment(&world, cfg);
    Ok(Population {
        world,
        users,
        archetype_alignment,
    })
}

pub(crate) type UserRng = ChaCha8Rng;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_users: 50,
            ..SimConfig::default()
        }
    }

    #[test]
    fn population_is_deterministic() {
        let a = gen_population(&small()).unwrap();
        let b = gen_population(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_population(&SimConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.users, c.users);
    }

    #[test]
    fn preferences_are_unit_norm() {
        for u in gen_population(&small()).unwrap().users {
            assert!((dot(&u.preference, &u.preference) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_archetype_population() {
        let pop = gen_population(&SimConfig { k_true: 1, ..small() }).unwrap();
        assert!(pop.users.iter().all(|u| u.archetype == 0));
        assert_eq!(pop.world.archetypes.len(), 1);
    }

    #[test]
    fn alignment_strictly_decreases_with_archetype() {
        for kind in [HeadKind::Continuous, HeadKind::Discrete] {
            let pop = gen_population(&SimConfig { action_kind: kind, ..small() }).unwrap();
            let al = &pop.archetype_alignment;
            assert!(al.windows(2).all(|w| w[0] > w[1]), "{kind:?}: {al:?}");
        }
    }

    #[test]
    fn expert_distribution_sums_to_one() {
        let cfg = small();
        let world = World::new(&cfg).unwrap();
        let mut rng = stream(3, 3);
        let p = world.sample_preference(0.2, &mut rng);
        let s = world.sample_state(&cfg, &p, &mut rng);
        for g in 0..3 {
            let d = world.expert_distribution(g, &s);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_index_inverts_the_cdf() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(sample_index(&p, 0.0), 0);
        assert_eq!(sample_index(&p, 0.19), 0);
        assert_eq!(sample_index(&p, 0.2), 1);
        assert_eq!(sample_index(&p, 0.69), 1);
        assert_eq!(sample_index(&p, 0.99), 2);
    }
}
