//! Layer-wise pruning allocations and the feasible set they live in.
//!
//! An allocation `r` removes `r_l` experts from layer `l`. It is feasible for a
//! [`BudgetSpec`] when the entries sum to the global budget, each entry stays
//! within its layer cap `n_l - k_l`, and, under [`Parity::Even`], every entry is
//! even. Internally everything works in "units" of the parity step (1 or 2), so
//! the even case is the odd-free case on a coarser lattice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Feasible sets up to this size are sampled by explicit enumeration.
pub const ENUMERATION_THRESHOLD: u128 = 4096;

/// Experts removed per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(Vec<usize>);

impl Allocation {
    pub fn new(r: Vec<usize>) -> Self {
        Self(r)
    }

    pub fn zeros(layers: usize) -> Self {
        Self(vec![0; layers])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Fraction of experts kept per layer, `1 - r_l / n_l`.
    pub fn density(&self, spec: &ModelSpec) -> Vec<f64> {
        self.0
            .iter()
            .zip(&spec.experts_per_layer)
            .map(|(&r, &n)| 1.0 - r as f64 / n as f64)
            .collect()
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [usize] {
        &mut self.0
    }
}

impl From<Vec<usize>> for Allocation {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    #[default]
    Any,
    Even,
}

impl Parity {
    pub fn step(self) -> usize {
        match self {
            Parity::Any => 1,
            Parity::Even => 2,
        }
    }
}

impl std::str::FromStr for Parity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Parity::Any),
            "even" => Ok(Parity::Even),
            other => Err(Error::validation("parity", format!("expected any|even, got {other:?}"))),
        }
    }
}

/// Global pruning budget with per-layer caps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub budget: usize,
    pub parity: Parity,
    pub caps: Vec<usize>,
}

impl BudgetSpec {
    pub fn new(budget: usize, parity: Parity, caps: Vec<usize>) -> Result<Self> {
        let spec = Self {
            budget,
            parity,
            caps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Caps `n_l - k_l` taken from a model spec.
    pub fn for_model(spec: &ModelSpec, budget: usize, parity: Parity) -> Result<Self> {
        Self::new(budget, parity, spec.caps())
    }

    pub fn validate(&self) -> Result<()> {
        if self.caps.is_empty() {
            return Err(Error::validation("caps", "at least one layer is required"));
        }
        if !self.budget.is_multiple_of(self.step()) {
            return Err(Error::Feasibility(format!(
                "budget {} is odd but parity is even",
                self.budget
            )));
        }
        let room: usize = self.effective_caps().iter().sum();
        if self.budget > room {
            return Err(Error::Feasibility(format!(
                "budget {} exceeds the total removable experts {room}",
                self.budget
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.caps.len()
    }

    pub fn step(&self) -> usize {
        self.parity.step()
    }

    /// Caps rounded down onto the parity lattice.
    pub fn effective_caps(&self) -> Vec<usize> {
        let s = self.step();
        self.caps.iter().map(|c| c / s * s).collect()
    }

    fn unit_caps(&self) -> Vec<usize> {
        let s = self.step();
        self.caps.iter().map(|c| c / s).collect()
    }

    fn units(&self) -> usize {
        self.budget / self.step()
    }

    fn to_allocation(&self, units: Vec<usize>) -> Allocation {
        let s = self.step();
        Allocation(units.into_iter().map(|u| u * s).collect())
    }

    fn check_layers(&self, layers: usize) -> Result<()> {
        if layers != self.layers() {
            return Err(Error::Shape(format!(
                "budget has {} layer caps but {layers} layers were requested",
                self.layers()
            )));
        }
        self.validate()
    }
}

/// True iff `alloc` sums to the budget, respects every cap, and satisfies the parity lattice.
pub fn is_feasible(alloc: &Allocation, budget: &BudgetSpec) -> bool {
    alloc.len() == budget.layers()
        && alloc.total() == budget.budget
        && alloc
            .as_slice()
            .iter()
            .zip(&budget.caps)
            .all(|(&r, &cap)| r <= cap && r % budget.step() == 0)
}

/// Near-uniform allocation: equal shares with the remainder on the lowest-index layers.
pub fn uniform_allocation(budget: &BudgetSpec, layers: usize) -> Result<Allocation> {
    budget.check_layers(layers)?;
    let caps = budget.unit_caps();
    let base = budget.units() / layers;
    let mut units: Vec<usize> = caps.iter().map(|&c| base.min(c)).collect();
    let mut left = budget.units() - units.iter().sum::<usize>();
    while left > 0 {
        for (u, &c) in units.iter_mut().zip(&caps) {
            if left == 0 {
                break;
            }
            if *u < c {
                *u += 1;
                left -= 1;
            }
        }
    }
    Ok(budget.to_allocation(units))
}

/// Which part of the layer stack a patterned seed concentrates pruning in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Early,
    Middle,
    Late,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Early, Region::Middle, Region::Late];

    /// Half-open layer range of this third of the stack (never empty).
    pub fn layers(self, total: usize) -> std::ops::Range<usize> {
        let i = match self {
            Region::Early => 0,
            Region::Middle => 1,
            Region::Late => 2,
        };
        let start = (i * total / 3).min(total - 1);
        let end = ((i + 1) * total / 3).max(start + 1);
        start..end
    }
}

/// Greedily packs the budget into one region, spilling to the nearest layers outside it.
pub fn patterned_allocation(budget: &BudgetSpec, layers: usize, region: Region) -> Result<Allocation> {
    budget.check_layers(layers)?;
    let range = region.layers(layers);
    let distance = |l: usize| {
        if range.contains(&l) {
            0
        } else if l < range.start {
            range.start - l
        } else {
            l + 1 - range.end
        }
    };
    let mut fill_order: Vec<usize> = (0..layers).collect();
    fill_order.sort_by_key(|&l| distance(l));

    let caps = budget.unit_caps();
    let mut units = vec![0; layers];
    let mut left = budget.units();
    for l in fill_order {
        let take = caps[l].min(left);
        units[l] = take;
        left -= take;
    }
    Ok(budget.to_allocation(units))
}

/// Early-, middle- and late-heavy seeds, in that order.
pub fn patterned_allocations(budget: &BudgetSpec, layers: usize) -> Result<Vec<Allocation>> {
    Region::ALL
        .iter()
        .map(|&r| patterned_allocation(budget, layers, r))
        .collect()
}

/// `ways[l][u]`: number of ways layers `l..` can absorb exactly `u` units. `None` on overflow.
fn completion_counts(caps: &[usize], units: usize) -> Option<Vec<Vec<u128>>> {
    let layers = caps.len();
    let mut ways = vec![vec![0u128; units + 1]; layers + 1];
    ways[layers][0] = 1;
    for l in (0..layers).rev() {
        for u in 0..=units {
            let mut total = 0u128;
            for v in 0..=caps[l].min(u) {
                total = total.checked_add(ways[l + 1][u - v])?;
            }
            ways[l][u] = total;
        }
    }
    Some(ways)
}

/// Size of the feasible set, or `None` if it does not fit in `u128`.
pub fn count_feasible(budget: &BudgetSpec) -> Option<u128> {
    completion_counts(&budget.unit_caps(), budget.units()).map(|w| w[0][budget.units()])
}

/// Every feasible allocation in lexicographic order, or a size error past `limit`.
pub fn enumerate_feasible(budget: &BudgetSpec, layers: usize, limit: usize) -> Result<Vec<Allocation>> {
    budget.check_layers(layers)?;
    match count_feasible(budget) {
        Some(n) if n <= limit as u128 => {}
        Some(n) => {
            return Err(Error::Size {
                count: n,
                lower_bound: false,
                limit,
            })
        }
        None => {
            return Err(Error::Size {
                count: u128::MAX,
                lower_bound: true,
                limit,
            })
        }
    }
    let caps = budget.unit_caps();
    // suffix_room[l]: units layers l.. can still take
    let mut suffix_room = vec![0; layers + 1];
    for l in (0..layers).rev() {
        suffix_room[l] = suffix_room[l + 1] + caps[l];
    }
    let mut out = Vec::new();
    let mut current = vec![0; layers];
    fn walk(
        l: usize,
        left: usize,
        caps: &[usize],
        suffix_room: &[usize],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if l == caps.len() {
            if left == 0 {
                out.push(current.clone());
            }
            return;
        }
        let lo = left.saturating_sub(suffix_room[l + 1]);
        let hi = caps[l].min(left);
        for v in lo..=hi {
            current[l] = v;
            walk(l + 1, left - v, caps, suffix_room, current, out);
        }
    }
    let mut raw = Vec::new();
    if budget.units() <= suffix_room[0] {
        walk(0, budget.units(), &caps, &suffix_room, &mut current, &mut raw);
    }
    out.extend(raw.into_iter().map(|u| budget.to_allocation(u)));
    Ok(out)
}

/// A random feasible allocation.
///
/// Exactly uniform over the feasible set whenever its size fits in `u128`: small sets
/// (at most [`ENUMERATION_THRESHOLD`]) are enumerated, larger ones are drawn layer by
/// layer from completion counts. Beyond `u128` it falls back to a random draw repaired
/// onto the budget, which is feasible but not uniform.
pub fn random_allocation<R: Rng + ?Sized>(budget: &BudgetSpec, layers: usize, rng: &mut R) -> Result<Allocation> {
    budget.check_layers(layers)?;
    let caps = budget.unit_caps();
    let units = budget.units();
    match completion_counts(&caps, units) {
        Some(ways) if ways[0][units] == 0 => Err(Error::Feasibility("feasible set is empty".into())),
        Some(ways) if ways[0][units] <= ENUMERATION_THRESHOLD => {
            let all = enumerate_feasible(budget, layers, ENUMERATION_THRESHOLD as usize)?;
            Ok(all[rng.random_range(0..all.len())].clone())
        }
        Some(ways) => {
            let mut out = vec![0; layers];
            let mut left = units;
            for l in 0..layers {
                let mut pick = rng.random_range(0..ways[l][left]);
                for v in 0..=caps[l].min(left) {
                    let w = ways[l + 1][left - v];
                    if pick < w {
                        out[l] = v;
                        break;
                    }
                    pick -= w;
                }
                left -= out[l];
            }
            Ok(budget.to_allocation(out))
        }
        None => Ok(budget.to_allocation(repair_draw(&caps, units, rng))),
    }
}

fn repair_draw<R: Rng + ?Sized>(caps: &[usize], units: usize, rng: &mut R) -> Vec<usize> {
    let mut out: Vec<usize> = caps.iter().map(|&c| rng.random_range(0..=c)).collect();
    let mut total: usize = out.iter().sum();
    while total > units {
        let l = rng.random_range(0..caps.len());
        if out[l] > 0 {
            out[l] -= 1;
            total -= 1;
        }
    }
    while total < units {
        let l = rng.random_range(0..caps.len());
        if out[l] < caps[l] {
            out[l] += 1;
            total += 1;
        }
    }
    out
}
