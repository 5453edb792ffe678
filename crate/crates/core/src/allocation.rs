//! Attribute tensor and item placement. Explicit axes come from catalog
//! metadata (category path, price bucket); implicit axes are sized from the
//! largest explicit group and filled by an allocating map that puts at most one
//! item in each tensor cell and every item in exactly one cell.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_max_weight;
use crate::catalog::{bucket_price, price_transform_range, Catalog};
use crate::error::{DirError, Result};
use crate::PROB_FLOOR;

/// A new group matching replaces the incumbent only when it wins by more than
/// this, so weight rounding inside the solver can never regress the loss.
pub const REALLOC_MIN_GAIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplicitAxisKind {
    Category,
    Price,
}

impl ExplicitAxisKind {
    pub fn name(self) -> &'static str {
        match self {
            ExplicitAxisKind::Category => "category",
            ExplicitAxisKind::Price => "price",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExplicitAxis {
    pub kind: ExplicitAxisKind,
    /// Vocabulary labels: category paths or price bucket digits.
    pub values: Vec<String>,
    /// Value index per catalog item.
    pub item_values: Vec<u32>,
}

/// Axis layout: explicit axes first (in declared order), implicit axes after.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeSpace {
    explicit: Vec<ExplicitAxis>,
    implicit_sizes: Vec<usize>,
}

impl AttributeSpace {
    /// Builds the space over a catalog. Implicit axes are all sized
    /// ceil(multiplier * base) where base is the smallest per-axis count whose
    /// power covers the largest explicit group.
    pub fn build(
        catalog: &Catalog,
        kinds: &[ExplicitAxisKind],
        implicit_axes: usize,
        multiplier: f64,
    ) -> Result<AttributeSpace> {
        if catalog.item_count() == 0 {
            return Err(DirError::EmptyCatalog);
        }
        if multiplier < 1.0 {
            return Err(DirError::Invalid(format!(
                "implicit multiplier {multiplier} must be >= 1"
            )));
        }
        let explicit = build_explicit_axes(catalog, kinds)?;
        let implicit_sizes = if implicit_axes == 0 {
            Vec::new()
        } else {
            let max_group = *group_sizes(&explicit, catalog.item_count())
                .values()
                .max()
                .unwrap();
            let base = per_axis_minimum(max_group, implicit_axes);
            let size = (multiplier * base as f64).ceil() as usize;
            vec![size.max(1); implicit_axes]
        };
        Ok(AttributeSpace {
            explicit,
            implicit_sizes,
        })
    }

    pub fn explicit_axes(&self) -> &[ExplicitAxis] {
        &self.explicit
    }

    /// Same explicit axes with a different implicit layout (possibly none).
    pub fn with_implicit_sizes(&self, implicit_sizes: Vec<usize>) -> AttributeSpace {
        AttributeSpace {
            explicit: self.explicit.clone(),
            implicit_sizes,
        }
    }

    pub fn implicit_sizes(&self) -> &[usize] {
        &self.implicit_sizes
    }

    pub fn explicit_count(&self) -> usize {
        self.explicit.len()
    }

    pub fn implicit_count(&self) -> usize {
        self.implicit_sizes.len()
    }

    pub fn axis_count(&self) -> usize {
        self.explicit.len() + self.implicit_sizes.len()
    }

    pub fn axis_size(&self, axis: usize) -> usize {
        if axis < self.explicit.len() {
            self.explicit[axis].values.len()
        } else {
            self.implicit_sizes[axis - self.explicit.len()]
        }
    }

    pub fn axis_name(&self, axis: usize) -> String {
        if axis < self.explicit.len() {
            self.explicit[axis].kind.name().to_string()
        } else {
            format!("implicit_{}", axis - self.explicit.len())
        }
    }

    pub fn axis_value_label(&self, axis: usize, value: u32) -> String {
        if axis < self.explicit.len() {
            self.explicit[axis].values[value as usize].clone()
        } else {
            value.to_string()
        }
    }

    /// Explicit coordinates of one item, in axis order.
    pub fn explicit_key(&self, item: u32) -> Vec<u32> {
        self.explicit
            .iter()
            .map(|a| a.item_values[item as usize])
            .collect()
    }

    /// Items grouped by identical explicit coordinates, keys and members in
    /// deterministic ascending order.
    pub fn explicit_groups(&self, catalog: &Catalog) -> Vec<ExplicitGroup> {
        let mut map: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
        for item in 0..catalog.item_count() as u32 {
            map.entry(self.explicit_key(item)).or_default().push(item);
        }
        map.into_iter()
            .map(|(key, members)| ExplicitGroup { key, members })
            .collect()
    }
}

fn build_explicit_axes(catalog: &Catalog, kinds: &[ExplicitAxisKind]) -> Result<Vec<ExplicitAxis>> {
    kinds
        .iter()
        .map(|&kind| match kind {
            ExplicitAxisKind::Category => {
                let mut values: Vec<String> =
                    catalog.items().iter().map(|i| i.category_label()).collect();
                values.sort();
                values.dedup();
                let index: HashMap<&str, u32> = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.as_str(), i as u32))
                    .collect();
                let item_values = catalog
                    .items()
                    .iter()
                    .map(|i| index[i.category_label().as_str()])
                    .collect();
                Ok(ExplicitAxis {
                    kind,
                    values,
                    item_values,
                })
            }
            ExplicitAxisKind::Price => {
                let range = match price_transform_range(catalog) {
                    Some((lo, hi)) if lo < hi => (lo, hi),
                    Some((lo, _)) => (lo, lo + 1.0),
                    None => (0.0, 1.0),
                };
                let item_values = catalog
                    .items()
                    .iter()
                    .map(|i| bucket_price(i.price, range))
                    .collect::<Result<Vec<u32>>>()?;
                Ok(ExplicitAxis {
                    kind,
                    values: (0..=5).map(|b| b.to_string()).collect(),
                    item_values,
                })
            }
        })
        .collect()
}

fn group_sizes(explicit: &[ExplicitAxis], item_count: usize) -> BTreeMap<Vec<u32>, usize> {
    let mut sizes: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for item in 0..item_count {
        let key: Vec<u32> = explicit.iter().map(|a| a.item_values[item]).collect();
        *sizes.entry(key).or_insert(0) += 1;
    }
    sizes
}

/// Smallest k with k^axes >= group, computed in integers.
fn per_axis_minimum(group: usize, axes: usize) -> usize {
    if group <= 1 {
        return 1;
    }
    let mut k = (group as f64).powf(1.0 / axes as f64).floor() as usize;
    k = k.max(1);
    while k.checked_pow(axes as u32).map_or(true, |p| p < group) {
        k += 1;
    }
    while k > 1 && (k - 1).checked_pow(axes as u32).map_or(false, |p| p >= group) {
        k -= 1;
    }
    k
}

/// Smallest per-axis implicit vocabulary that can host every explicit group.
/// With one implicit axis this is simply the largest group size.
pub fn minimum_implicit_count(
    catalog: &Catalog,
    kinds: &[ExplicitAxisKind],
    implicit_axes: usize,
) -> Result<usize> {
    if catalog.item_count() == 0 {
        return Err(DirError::EmptyCatalog);
    }
    if implicit_axes == 0 {
        return Err(DirError::Invalid("no implicit axes requested".into()));
    }
    let explicit = build_explicit_axes(catalog, kinds)?;
    let max_group = *group_sizes(&explicit, catalog.item_count())
        .values()
        .max()
        .unwrap();
    Ok(per_axis_minimum(max_group, implicit_axes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplicitGroup {
    pub key: Vec<u32>,
    pub members: Vec<u32>,
}

/// The allocating map: full coordinates per item plus the inverse cell index.
/// Explicit coordinates always equal the item's attribute values; implicit
/// coordinates are what allocation and reallocation decide.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    cells: Vec<Vec<u32>>,
    occupancy: HashMap<Vec<u32>, u32>,
}

impl Allocation {
    pub fn from_cells(cells: Vec<Vec<u32>>, space: &AttributeSpace) -> Result<Allocation> {
        let mut occupancy = HashMap::with_capacity(cells.len());
        for (item, cell) in cells.iter().enumerate() {
            if cell.len() != space.axis_count() {
                return Err(DirError::Invalid(format!(
                    "item {item}: cell has {} coordinates, space has {} axes",
                    cell.len(),
                    space.axis_count()
                )));
            }
            for (axis, &v) in cell.iter().enumerate() {
                if (v as usize) >= space.axis_size(axis) {
                    return Err(DirError::Invalid(format!(
                        "item {item}: coordinate {v} out of range on axis {axis}"
                    )));
                }
            }
            for (axis, ex) in space.explicit_axes().iter().enumerate() {
                if cell[axis] != ex.item_values[item] {
                    return Err(DirError::Invalid(format!(
                        "item {item}: explicit coordinate mismatch on axis {axis}"
                    )));
                }
            }
            if let Some(prev) = occupancy.insert(cell.clone(), item as u32) {
                return Err(DirError::Invalid(format!(
                    "items {prev} and {item} share cell {cell:?}"
                )));
            }
        }
        Ok(Allocation { cells, occupancy })
    }

    pub fn coords(&self, item: u32) -> Result<&[u32]> {
        self.cells
            .get(item as usize)
            .map(|c| c.as_slice())
            .ok_or(DirError::Unallocated(item))
    }

    pub fn cells(&self) -> &[Vec<u32>] {
        &self.cells
    }

    pub fn item_at(&self, cell: &[u32]) -> Option<u32> {
        self.occupancy.get(cell).copied()
    }

    pub fn item_count(&self) -> usize {
        self.cells.len()
    }

    /// Checks both placement constraints: every cell holds at most one item
    /// (the occupancy map construction rejects collisions) and every item has
    /// exactly one complete, in-range cell.
    pub fn verify(&self, space: &AttributeSpace) -> Result<()> {
        if self.occupancy.len() != self.cells.len() {
            return Err(DirError::Invalid("occupancy out of sync".into()));
        }
        Allocation::from_cells(self.cells.clone(), space).map(|_| ())
    }
}

/// Places every item uniformly at random into a free implicit cell of its
/// explicit group. Errors when a group has more items than cells.
pub fn random_allocation(catalog: &Catalog, space: &AttributeSpace, seed: u64) -> Result<Allocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = space.implicit_sizes();
    let mut cell_total = 1usize;
    for &s in sizes {
        cell_total = cell_total
            .checked_mul(s)
            .ok_or_else(|| DirError::Invalid("implicit cell count overflow".into()))?;
    }
    let mut cells = vec![Vec::new(); catalog.item_count()];
    for group in space.explicit_groups(catalog) {
        if group.members.len() > cell_total {
            return Err(DirError::InfeasibleGroup {
                group: format!("{:?}", group.key),
                members: group.members.len(),
                cells: cell_total,
            });
        }
        let picks = rand::seq::index::sample(&mut rng, cell_total, group.members.len());
        for (&item, flat) in group.members.iter().zip(picks.iter()) {
            let mut cell = group.key.clone();
            cell.extend(decode_cell(flat, sizes));
            cells[item as usize] = cell;
        }
    }
    Allocation::from_cells(cells, space)
}

fn decode_cell(mut flat: usize, sizes: &[usize]) -> Vec<u32> {
    let mut coords = vec![0u32; sizes.len()];
    for m in (0..sizes.len()).rev() {
        coords[m] = (flat % sizes[m]) as u32;
        flat /= sizes[m];
    }
    coords
}

/// One group's matching instance: row per item, column per implicit value.
#[derive(Debug, Clone)]
pub struct AssignmentProblem {
    pub items: Vec<u32>,
    pub weights: Vec<Vec<f64>>,
}

/// Row weights are summed log-scores of the item's train buyers under each
/// candidate implicit value; items nobody bought in train get all-zero rows.
pub fn build_assignment_problem(
    group: &ExplicitGroup,
    user_implicit_probs: &[Vec<f64>],
    catalog: &Catalog,
    implicit_size: usize,
) -> AssignmentProblem {
    let weights = group
        .members
        .iter()
        .map(|&item| {
            let mut row = vec![0.0; implicit_size];
            for &u in catalog.train_users_of(item) {
                let probs = &user_implicit_probs[u as usize];
                for (w, &p) in row.iter_mut().zip(probs.iter()) {
                    *w += p.max(PROB_FLOOR).ln();
                }
            }
            row
        })
        .collect();
    AssignmentProblem {
        items: group.members.clone(),
        weights,
    }
}

/// Max-weight matching of a problem's items onto implicit values.
pub fn solve_assignment(problem: &AssignmentProblem) -> Result<Vec<(u32, u32)>> {
    let solved = solve_max_weight(&problem.weights)?;
    Ok(problem
        .items
        .iter()
        .zip(solved.row_to_col.iter())
        .map(|(&item, &col)| (item, col as u32))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ReallocStats {
    pub moved: usize,
    pub groups: usize,
    /// Matching objective of the incumbent assignment, summed over groups.
    pub weight_before: f64,
    /// Matching objective actually installed (never below `weight_before`).
    pub weight_after: f64,
}

/// Rebuilds one implicit axis by matching within every group of items that
/// share all other coordinates. Items without train signal (`None` rows) keep
/// their incumbent value, and a group's new matching is only installed when it
/// strictly beats the incumbent total.
pub fn reallocate(
    alloc: &Allocation,
    weight_rows: &[Option<Vec<f64>>],
    space: &AttributeSpace,
    axis: usize,
) -> Result<(Allocation, ReallocStats)> {
    if axis < space.explicit_count() || axis >= space.axis_count() {
        return Err(DirError::Invalid(format!(
            "axis {axis} is not an implicit axis"
        )));
    }
    if weight_rows.len() != alloc.item_count() {
        return Err(DirError::Invalid(format!(
            "expected {} weight rows, got {}",
            alloc.item_count(),
            weight_rows.len()
        )));
    }
    let size = space.axis_size(axis);
    for (item, row) in weight_rows.iter().enumerate() {
        if let Some(row) = row {
            if row.len() != size {
                return Err(DirError::Invalid(format!(
                    "item {item}: weight row has {} entries, axis has {size}",
                    row.len()
                )));
            }
        }
    }

    let mut groups: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
    for item in 0..alloc.item_count() as u32 {
        let coords = alloc.coords(item)?;
        let mut key = coords.to_vec();
        key.remove(axis);
        groups.entry(key).or_default().push(item);
    }

    let group_list: Vec<Vec<u32>> = groups.into_values().collect();
    let solved: Vec<Result<GroupOutcome>> = group_list
        .par_iter()
        .map(|members| solve_group(alloc, weight_rows, axis, size, members))
        .collect();

    let mut cells = alloc.cells.clone();
    let mut stats = ReallocStats {
        groups: group_list.len(),
        ..ReallocStats::default()
    };
    for outcome in solved {
        let outcome = outcome?;
        stats.weight_before += outcome.old_total;
        stats.weight_after += outcome.new_total;
        stats.moved += outcome.moved;
        for (item, value) in outcome.values {
            cells[item as usize][axis] = value;
        }
    }
    let next = Allocation::from_cells(cells, space)?;
    Ok((next, stats))
}

struct GroupOutcome {
    values: Vec<(u32, u32)>,
    old_total: f64,
    new_total: f64,
    moved: usize,
}

fn solve_group(
    alloc: &Allocation,
    weight_rows: &[Option<Vec<f64>>],
    axis: usize,
    size: usize,
    members: &[u32],
) -> Result<GroupOutcome> {
    let mut used = vec![false; size];
    let mut active: Vec<u32> = Vec::new();
    for &item in members {
        match &weight_rows[item as usize] {
            Some(_) => active.push(item),
            None => {
                let v = alloc.coords(item)?[axis] as usize;
                used[v] = true;
            }
        }
    }
    if active.is_empty() {
        return Ok(GroupOutcome {
            values: Vec::new(),
            old_total: 0.0,
            new_total: 0.0,
            moved: 0,
        });
    }
    let columns: Vec<u32> = (0..size as u32).filter(|&v| !used[v as usize]).collect();
    let weights: Vec<Vec<f64>> = active
        .iter()
        .map(|&item| {
            let row = weight_rows[item as usize].as_ref().unwrap();
            columns.iter().map(|&c| row[c as usize]).collect()
        })
        .collect();
    let solved = solve_max_weight(&weights)?;

    let mut old_total = 0.0;
    let mut new_total = 0.0;
    for (r, &item) in active.iter().enumerate() {
        let row = weight_rows[item as usize].as_ref().unwrap();
        old_total += row[alloc.coords(item)?[axis] as usize];
        new_total += row[columns[solved.row_to_col[r]] as usize];
    }
    if new_total > old_total + REALLOC_MIN_GAIN {
        let values: Vec<(u32, u32)> = active
            .iter()
            .enumerate()
            .map(|(r, &item)| (item, columns[solved.row_to_col[r]]))
            .collect();
        let moved = values
            .iter()
            .filter(|&&(item, v)| alloc.coords(item).unwrap()[axis] != v)
            .count();
        Ok(GroupOutcome {
            values,
            old_total,
            new_total,
            moved,
        })
    } else {
        Ok(GroupOutcome {
            values: Vec::new(),
            old_total,
            new_total: old_total,
            moved: 0,
        })
    }
}
