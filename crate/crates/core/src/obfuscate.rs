//! Semantics-preserving readability degradations: function name erosion
//! (FNE), identifier renaming (IRN) and dead code injection (DCI).
//!
//! Every transform renders its edits and reparses the result, so the
//! returned model carries a fresh scope table for the new text.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng};
use crate::srcmodel::{CommitError, FunctionModel, Role, ScopeTable};

/// Upper bound on injected statements per function.
pub const MAX_DCI_LINES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObfuscateError {
    #[error("cannot inject {requested} lines (limit {MAX_DCI_LINES})")]
    InjectionOverflow { requested: usize },
    #[error("function body has no insertion slot")]
    BodyTooSmall,
    #[error(transparent)]
    Commit(#[from] CommitError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenameEntry {
    /// Binding group index in the input scope table.
    pub group: usize,
    pub role: Role,
    pub original: String,
    pub replacement: String,
}

/// Binding groups renamed by a transform, in replacement order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenameMap {
    pub entries: Vec<RenameEntry>,
}

impl RenameMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn replacement_for(&self, group: usize) -> Option<&str> {
        self.entries.iter().find(|e| e.group == group).map(|e| e.replacement.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeadKind {
    UnusedAssignment,
    DeadBranch,
    NoOpLoop,
}

impl DeadKind {
    pub fn lines(self) -> usize {
        match self {
            DeadKind::UnusedAssignment => 1,
            DeadKind::DeadBranch | DeadKind::NoOpLoop => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DciInsertion {
    /// Top-level slot index in the input model.
    pub slot: usize,
    pub kind: DeadKind,
    /// Generated statements as (relative depth, text).
    pub lines: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DciPlan {
    pub n_lines: usize,
    pub seed: u64,
    pub insertions: Vec<DciInsertion>,
    /// Identifiers introduced by the injected code.
    pub fresh_names: Vec<String>,
}

fn apply_renames(model: &FunctionModel, scope: &ScopeTable, renames: &[(usize, String)]) -> Result<FunctionModel, ObfuscateError> {
    let mut edited = model.clone();
    for (gid, name) in renames {
        for &oi in &scope.groups[*gid].occurrences {
            edited.replace(scope.occurrences[oi].span, name.clone());
        }
    }
    Ok(edited.commit()?.0)
}

/// Names used by occurrences outside the given groups.
fn names_outside(scope: &ScopeTable, groups: &HashSet<usize>) -> HashSet<String> {
    scope
        .occurrences
        .iter()
        .filter(|o| o.role != Role::StringContent && o.group.is_none_or(|g| !groups.contains(&g)))
        .map(|o| o.text.clone())
        .collect()
}

/// Function name erosion: rename the function (and recursive references) to
/// `func_1`, or the next free `func_k` if `func_1` is taken.
pub fn fne(model: &FunctionModel) -> Result<FunctionModel, ObfuscateError> {
    let scope = model.scope();
    let Some(group) = scope.groups.iter().find(|g| g.role == Role::FunctionName) else {
        return Ok(model.clone());
    };
    let taken = names_outside(scope, &HashSet::from([group.id]));
    let name = (1..).map(|k| format!("func_{k}")).find(|n| !taken.contains(n)).expect("unbounded");
    if name == group.name {
        return Ok(model.clone());
    }
    apply_renames(model, scope, &[(group.id, name)])
}

/// Identifier renaming: every parameter, local, nested definition name and
/// comprehension target group becomes `var_k`, numbered by first occurrence.
pub fn irn(model: &FunctionModel, scope: &ScopeTable) -> Result<(FunctionModel, RenameMap), ObfuscateError> {
    let renamed: Vec<_> = scope.groups.iter().filter(|g| g.role.is_renameable()).collect();
    if renamed.is_empty() {
        return Ok((model.clone(), RenameMap::default()));
    }
    let ids: HashSet<usize> = renamed.iter().map(|g| g.id).collect();
    let taken = names_outside(scope, &ids);
    let mut k = 0usize;
    let mut map = RenameMap::default();
    for g in renamed {
        let replacement = loop {
            k += 1;
            let candidate = format!("var_{k}");
            if !taken.contains(&candidate) {
                break candidate;
            }
        };
        map.entries.push(RenameEntry { group: g.id, role: g.role, original: g.name.clone(), replacement });
    }
    let renames: Vec<(usize, String)> = map.entries.iter().map(|e| (e.group, e.replacement.clone())).collect();
    if map.entries.iter().all(|e| e.original == e.replacement) {
        return Ok((model.clone(), map));
    }
    Ok((apply_renames(model, scope, &renames)?, map))
}

struct FreshNames {
    suffix: String,
    taken: HashSet<String>,
    next: usize,
    issued: Vec<String>,
}

impl FreshNames {
    fn next(&mut self) -> String {
        loop {
            self.next += 1;
            let name = format!("_dci{}_{}", self.next, self.suffix);
            if self.taken.insert(name.clone()) {
                self.issued.push(name.clone());
                return name;
            }
        }
    }
}

/// Dead code injection: insert `n_lines` dead logical statements at seeded
/// random top-level slots.
pub fn dci(model: &FunctionModel, n_lines: usize, seed: u64) -> Result<(FunctionModel, DciPlan), ObfuscateError> {
    if n_lines > MAX_DCI_LINES {
        return Err(ObfuscateError::InjectionOverflow { requested: n_lines });
    }
    let mut plan = DciPlan { n_lines, seed, insertions: Vec::new(), fresh_names: Vec::new() };
    if n_lines == 0 {
        return Ok((model.clone(), plan));
    }
    let first_slot = usize::from(model.docstring().is_some());
    let slots: Vec<usize> = (first_slot..model.slot_count()).collect();
    if slots.is_empty() {
        return Err(ObfuscateError::BodyTooSmall);
    }
    let mut r = rng(derive_seed(seed, "dci"));
    let mut fresh = FreshNames {
        suffix: format!("{:06x}", derive_seed(seed, "dci-suffix") & 0xff_ffff),
        taken: model.scope().identifier_names().into_iter().map(String::from).collect(),
        next: 0,
        issued: Vec::new(),
    };
    let mut remaining = n_lines;
    while remaining > 0 {
        let kinds: &[DeadKind] = if remaining >= 2 {
            &[DeadKind::UnusedAssignment, DeadKind::DeadBranch, DeadKind::NoOpLoop]
        } else {
            &[DeadKind::UnusedAssignment]
        };
        let kind = *kinds.choose(&mut r).expect("non-empty");
        let slot = *slots.choose(&mut r).expect("non-empty");
        let lines = generate(kind, &mut r, &mut fresh);
        remaining -= kind.lines();
        plan.insertions.push(DciInsertion { slot, kind, lines });
    }
    let mut edited = model.clone();
    for ins in &plan.insertions {
        edited.insert(ins.slot, ins.lines.clone()).map_err(CommitError::from)?;
    }
    plan.fresh_names = fresh.issued;
    Ok((edited.commit()?.0, plan))
}

fn generate(kind: DeadKind, r: &mut impl Rng, fresh: &mut FreshNames) -> Vec<(usize, String)> {
    const OPS: [&str; 3] = ["+", "-", "*"];
    match kind {
        DeadKind::UnusedAssignment => {
            let v = fresh.next();
            let a: u32 = r.random_range(0..100);
            let b: u32 = r.random_range(1..100);
            let op = OPS.choose(r).expect("non-empty");
            vec![(0, format!("{v} = {a} {op} {b}"))]
        }
        DeadKind::DeadBranch => {
            let a: u32 = r.random_range(0..50);
            let b: u32 = a + r.random_range(1..50);
            let guard = match r.random_range(0..3) {
                0 => format!("{a} == {b}"),
                1 => format!("{b} < {a}"),
                _ => format!("{a} > {b}"),
            };
            let v = fresh.next();
            let c: u32 = r.random_range(0..100);
            vec![(0, format!("if {guard}:")), (1, format!("{v} = {c}"))]
        }
        DeadKind::NoOpLoop => {
            let it = fresh.next();
            let v = fresh.next();
            vec![(0, format!("for {it} in ():")), (1, format!("{v} = {it}"))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srcmodel::{parse_function, render};

    fn code(m: &FunctionModel) -> String {
        render(m).unwrap()
    }

    #[test]
    fn fne_renames_definition_only() {
        let (m, _) = parse_function("def open_many(filenames):\n    return filenames\n").unwrap();
        assert_eq!(code(&fne(&m).unwrap()), "def func_1(filenames):\n    return filenames\n");
    }

    #[test]
    fn fne_is_idempotent_and_avoids_collisions() {
        let (m, _) = parse_function("def func_1():\n    return 42\n").unwrap();
        assert_eq!(code(&fne(&m).unwrap()), "def func_1():\n    return 42\n");
        let (m, _) = parse_function("def f(func_1):\n    return f(func_1)\n").unwrap();
        let once = fne(&m).unwrap();
        assert_eq!(code(&once), "def func_2(func_1):\n    return func_2(func_1)\n");
        assert_eq!(code(&fne(&once).unwrap()), code(&once));
    }

    #[test]
    fn fne_handles_recursion() {
        let (m, _) = parse_function("def fact(n): return 1 if n<2 else n*fact(n-1)\n").unwrap();
        assert_eq!(code(&fne(&m).unwrap()), "def func_1(n): return 1 if n<2 else n*func_1(n-1)\n");
    }

    #[test]
    fn irn_numbers_by_first_occurrence() {
        let src = "def func_1(filenames):\n    files = []\n    for name in filenames:\n        files.append(open(name))\n    return files\n";
        let (m, s) = parse_function(src).unwrap();
        let (out, map) = irn(&m, &s).unwrap();
        let pairs: Vec<_> = map.entries.iter().map(|e| (e.original.as_str(), e.replacement.as_str())).collect();
        assert_eq!(pairs, [("filenames", "var_1"), ("files", "var_2"), ("name", "var_3")]);
        assert_eq!(
            code(&out),
            "def func_1(var_1):\n    var_2 = []\n    for var_3 in var_1:\n        var_2.append(open(var_3))\n    return var_2\n"
        );
    }

    #[test]
    fn irn_without_bindings_is_identity() {
        let (m, s) = parse_function("def func_1(): return 42\n").unwrap();
        let (out, map) = irn(&m, &s).unwrap();
        assert!(map.is_empty());
        assert_eq!(code(&out), "def func_1(): return 42\n");
    }

    #[test]
    fn irn_skips_taken_names_and_is_idempotent() {
        let (m, s) = parse_function("def f(a):\n    return var_1 + a\n").unwrap();
        let (out, map) = irn(&m, &s).unwrap();
        assert_eq!(map.entries[0].replacement, "var_2");
        let (again, _) = irn(&out, out.scope()).unwrap();
        assert_eq!(code(&again), code(&out));
    }

    #[test]
    fn dci_counts_and_determinism() {
        let src = "def f(x):\n    y = x + 1\n    z = y * 2\n    return z\n";
        let (m, _) = parse_function(src).unwrap();
        let (a, plan_a) = dci(&m, 5, 3).unwrap();
        let (b, plan_b) = dci(&m, 5, 3).unwrap();
        assert_eq!(plan_a, plan_b);
        assert_eq!(code(&a), code(&b));
        assert_eq!(a.body().len(), m.body().len() + 5);
        assert_eq!(plan_a.insertions.iter().map(|i| i.kind.lines()).sum::<usize>(), 5);
        let (c, _) = dci(&m, 5, 4).unwrap();
        assert_ne!(code(&a), code(&c));
    }

    #[test]
    fn dci_zero_and_overflow() {
        let (m, _) = parse_function("def f():\n    pass\n").unwrap();
        assert_eq!(code(&dci(&m, 0, 1).unwrap().0), "def f():\n    pass\n");
        assert_eq!(dci(&m, 1001, 1).unwrap_err(), ObfuscateError::InjectionOverflow { requested: 1001 });
    }

    #[test]
    fn dci_never_uses_original_names() {
        let (m, s) = parse_function("def f(_dci1_000000):\n    return _dci1_000000\n").unwrap();
        let (_, plan) = dci(&m, 10, 0).unwrap();
        let originals = s.identifier_names();
        assert!(plan.fresh_names.iter().all(|n| !originals.contains(n.as_str())));
    }
}
