//! Expert importance matrices: one `{High, Mid, Low}` level per (class, concept).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbm::ConceptScheme;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::FORMAT_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Importance {
    High,
    Mid,
    Low,
}

impl Importance {
    pub const ALL: [Importance; 3] = [Importance::High, Importance::Mid, Importance::Low];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "High" => Some(Importance::High),
            "Mid" => Some(Importance::Mid),
            "Low" => Some(Importance::Low),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Importance::High => "High",
            Importance::Mid => "Mid",
            Importance::Low => "Low",
        }
    }
}

impl fmt::Display for Importance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `K x L` importance levels laid out in scheme order (row = class).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportanceMatrix {
    classes: Vec<String>,
    concepts: Vec<String>,
    levels: Vec<Importance>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeFile {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    classes: Vec<String>,
    concepts: Vec<String>,
    importance: Vec<Vec<String>>,
}

impl ImportanceMatrix {
    /// Builds a matrix from rows of levels in scheme order.
    pub fn new(scheme: &ConceptScheme, rows: Vec<Vec<Importance>>) -> Result<Self> {
        let (k, l) = (scheme.num_classes(), scheme.num_concepts());
        if rows.len() != k || rows.iter().any(|r| r.len() != l) {
            return Err(Error::config(format!("importance matrix must be {k} x {l}")));
        }
        Ok(ImportanceMatrix {
            classes: scheme.classes.clone(),
            concepts: scheme.concepts.iter().map(|c| c.name.clone()).collect(),
            levels: rows.into_iter().flatten().collect(),
        })
    }

    /// Every cell set to `level`.
    pub fn uniform(scheme: &ConceptScheme, level: Importance) -> Self {
        let rows = vec![vec![level; scheme.num_concepts()]; scheme.num_classes()];
        Self::new(scheme, rows).expect("dimensions come from the scheme")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn get(&self, class: usize, concept: usize) -> Importance {
        self.levels[class * self.concepts.len() + concept]
    }

    pub fn row(&self, class: usize) -> &[Importance] {
        let l = self.concepts.len();
        &self.levels[class * l..(class + 1) * l]
    }

    /// Errors unless the matrix was built for exactly this scheme.
    pub fn check_scheme(&self, scheme: &ConceptScheme) -> Result<()> {
        let same_concepts = self.concepts.len() == scheme.num_concepts()
            && self.concepts.iter().zip(&scheme.concepts).all(|(a, b)| *a == b.name);
        if self.classes != scheme.classes || !same_concepts {
            return Err(Error::config(
                "importance matrix classes/concepts do not match the concept scheme",
            ));
        }
        Ok(())
    }

    /// All `(class, concept)` cells at `level`, in row-major order.
    pub fn pairs(&self, level: Importance) -> BTreeSet<(usize, usize)> {
        let l = self.concepts.len();
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == level)
            .map(|(i, _)| (i / l, i % l))
            .collect()
    }

    /// Row-major `K*L` 0/1 mask of cells at `level`.
    pub fn mask(&self, level: Importance) -> Vec<f64> {
        self.levels.iter().map(|&v| if v == level { 1.0 } else { 0.0 }).collect()
    }

    pub fn load(path: &Path, scheme: &ConceptScheme) -> Result<Self> {
        let file: KnowledgeFile = read_json(path)?;
        let err = |m: String| Error::parse(path.display().to_string(), None, m);
        if file.format_version != FORMAT_VERSION {
            return Err(err(format!("unsupported format_version {}", file.format_version)));
        }
        if file.importance.len() != file.classes.len() {
            return Err(err(format!(
                "{} importance rows for {} classes",
                file.importance.len(),
                file.classes.len()
            )));
        }
        for (i, row) in file.importance.iter().enumerate() {
            if row.len() != file.concepts.len() {
                return Err(err(format!(
                    "row {:?} has {} cells for {} concepts",
                    file.classes[i],
                    row.len(),
                    file.concepts.len()
                )));
            }
        }
        // file position of each scheme class / concept
        let mut class_pos = vec![None; scheme.num_classes()];
        for (i, name) in file.classes.iter().enumerate() {
            let k = scheme
                .class_index(name)
                .ok_or_else(|| err(format!("unknown class {name:?}")))?;
            if class_pos[k].replace(i).is_some() {
                return Err(err(format!("class {name:?} listed twice")));
            }
        }
        let mut concept_pos = vec![None; scheme.num_concepts()];
        for (j, name) in file.concepts.iter().enumerate() {
            let l = scheme
                .concept_index(name)
                .ok_or_else(|| err(format!("unknown concept {name:?}")))?;
            if concept_pos[l].replace(j).is_some() {
                return Err(err(format!("concept {name:?} listed twice")));
            }
        }
        let mut rows = Vec::with_capacity(scheme.num_classes());
        for (k, pos) in class_pos.iter().enumerate() {
            let i = pos.ok_or_else(|| err(format!("missing row for class {:?}", scheme.classes[k])))?;
            let mut row = Vec::with_capacity(scheme.num_concepts());
            for (l, pos) in concept_pos.iter().enumerate() {
                let j = pos.ok_or_else(|| {
                    err(format!(
                        "missing cell ({:?}, {:?})",
                        scheme.classes[k], scheme.concepts[l].name
                    ))
                })?;
                let cell = &file.importance[i][j];
                row.push(Importance::parse(cell).ok_or_else(|| {
                    err(format!("invalid level {cell:?}; expected High, Mid or Low"))
                })?);
            }
            rows.push(row);
        }
        Self::new(scheme, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_note(path, None)
    }

    pub fn save_with_note(&self, path: &Path, note: Option<&str>) -> Result<()> {
        let file = KnowledgeFile {
            format_version: FORMAT_VERSION,
            note: note.map(str::to_string),
            classes: self.classes.clone(),
            concepts: self.concepts.clone(),
            importance: (0..self.num_classes())
                .map(|k| self.row(k).iter().map(|v| v.as_str().to_string()).collect())
                .collect(),
        };
        write_json(path, &file)
    }
}

/// Shuffles each class row independently with a seeded RNG. Row level counts
/// are preserved, only their placement changes.
pub fn randomize_importance(matrix: &ImportanceMatrix, seed: u64) -> ImportanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = matrix.num_concepts();
    let mut out = matrix.clone();
    for row in out.levels.chunks_mut(l) {
        row.shuffle(&mut rng);
    }
    out
}

/// Convenience wrapper matching [`ImportanceMatrix::load`].
pub fn load_importance(path: &Path, scheme: &ConceptScheme) -> Result<ImportanceMatrix> {
    ImportanceMatrix::load(path, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbm::tests::scheme;
    use std::fs;
    use Importance::*;

    #[test]
    fn pairs_enumerate_cells() {
        let s = scheme(2, &[2, 2]);
        let m = ImportanceMatrix::new(&s, vec![vec![High, Low], vec![High, Low]]).unwrap();
        assert_eq!(m.pairs(High).into_iter().collect::<Vec<_>>(), vec![(0, 0), (1, 0)]);
        assert_eq!(m.pairs(Low).into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 1)]);
        assert!(m.pairs(Mid).is_empty());
    }

    #[test]
    fn all_mid_has_no_high_or_low() {
        let s = scheme(3, &[2, 3, 2, 2]);
        let m = ImportanceMatrix::uniform(&s, Mid);
        assert!(m.pairs(High).is_empty());
        assert!(m.pairs(Low).is_empty());
        assert_eq!(m.pairs(Mid).len(), 12);
    }

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("k.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_reorders_to_scheme_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = scheme(2, &[2, 2, 2]);
        let p = write(
            dir.path(),
            r#"{"format_version":1,"classes":["class1","class0"],"concepts":["concept2","concept0","concept1"],
               "importance":[["Low","High","Mid"],["High","Mid","Low"]]}"#,
        );
        let m = ImportanceMatrix::load(&p, &s).unwrap();
        assert_eq!(m.row(0), &[Mid, Low, High]);
        assert_eq!(m.row(1), &[High, Mid, Low]);
    }

    #[test]
    fn load_errors_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let s = scheme(2, &[2, 2]);
        let cases = [
            (r#"{"format_version":1,"classes":["class0","nope"],"concepts":["concept0","concept1"],"importance":[["High","Low"],["High","Low"]]}"#, "unknown class"),
            (r#"{"format_version":1,"classes":["class0","class1"],"concepts":["concept0","zzz"],"importance":[["High","Low"],["High","Low"]]}"#, "unknown concept"),
            (r#"{"format_version":1,"classes":["class0","class1"],"concepts":["concept0"],"importance":[["High"],["High"]]}"#, "missing cell"),
            (r#"{"format_version":1,"classes":["class0"],"concepts":["concept0","concept1"],"importance":[["High","Low"]]}"#, "missing row"),
            (r#"{"format_version":1,"classes":["class0","class1"],"concepts":["concept0","concept1"],"importance":[["High","Low"],["high","Low"]]}"#, "invalid level"),
            (r#"{"format_version":1,"classes":["class0","class1"],"concepts":["concept0","concept1"],"importance":[["High","Low"],["High"]]}"#, "cells"),
        ];
        for (body, needle) in cases {
            let p = write(dir.path(), body);
            let e = ImportanceMatrix::load(&p, &s).unwrap_err().to_string();
            assert!(e.contains(needle), "{e:?} should mention {needle:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = scheme(3, &[2, 2, 3, 2]);
        let m = ImportanceMatrix::new(
            &s,
            vec![vec![High, Mid, Low, Low], vec![Low, High, Mid, High], vec![Mid, Mid, Mid, Low]],
        )
        .unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(ImportanceMatrix::load(&p, &s).unwrap(), m);
    }

    #[test]
    fn randomize_keeps_constant_rows() {
        let s = scheme(2, &[2, 2, 2]);
        let m = ImportanceMatrix::new(&s, vec![vec![Low; 3], vec![High; 3]]).unwrap();
        assert_eq!(randomize_importance(&m, 9), m);
    }

    #[test]
    fn randomize_is_deterministic_per_seed() {
        let s = scheme(5, &[2; 11]);
        let row = vec![High, High, High, Mid, Mid, Mid, Mid, Low, Low, Low, Low];
        let m = ImportanceMatrix::new(&s, vec![row; 5]).unwrap();
        assert_eq!(randomize_importance(&m, 7), randomize_importance(&m, 7));
        assert_ne!(randomize_importance(&m, 7), randomize_importance(&m, 8));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn level() -> impl Strategy<Value = Importance> {
            prop_oneof![Just(High), Just(Mid), Just(Low)]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn randomize_preserves_row_counts(cells in prop::collection::vec(level(), 12), seed in any::<u64>()) {
                let s = scheme(3, &[2; 4]);
                let rows: Vec<Vec<Importance>> = cells.chunks(4).map(|c| c.to_vec()).collect();
                let m = ImportanceMatrix::new(&s, rows).unwrap();
                let r = randomize_importance(&m, seed);
                for k in 0..3 {
                    for lv in Importance::ALL {
                        let a = m.row(k).iter().filter(|&&v| v == lv).count();
                        let b = r.row(k).iter().filter(|&&v| v == lv).count();
                        prop_assert_eq!(a, b);
                    }
                }
            }

            #[test]
            fn pairs_partition_cells(cells in prop::collection::vec(level(), 12)) {
                let s = scheme(3, &[2; 4]);
                let rows: Vec<Vec<Importance>> = cells.chunks(4).map(|c| c.to_vec()).collect();
                let m = ImportanceMatrix::new(&s, rows).unwrap();
                let (h, md, l) = (m.pairs(High), m.pairs(Mid), m.pairs(Low));
                prop_assert_eq!(h.len() + md.len() + l.len(), 12);
                prop_assert!(h.is_disjoint(&md) && h.is_disjoint(&l) && md.is_disjoint(&l));
            }
        }
    }
}
