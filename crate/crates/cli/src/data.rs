use std::fs::File;
use std::path::{Path, PathBuf};

use gradecast::dataset::{ingest_records_with_terms, read_catalog, read_term_map, CatalogEntry, FeatureSource, GradeRecord};

use crate::error::{CliError, CliResult, Kind};

/// Contents of a data directory: `grades.csv` and `catalog.json`, plus the
/// optional `term_map.json`, `students.csv` and `courses.csv`.
pub struct DataDir {
    pub records: Vec<GradeRecord>,
    pub catalog: Vec<CatalogEntry>,
    pub features: Option<FeatureSource>,
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::new(Kind::Data, "IoError", format!("{}: {e}", path.display())))
}

impl DataDir {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = |name: &str| -> PathBuf { dir.join(name) };
        let terms = if path("term_map.json").exists() {
            Some(read_term_map(open(&path("term_map.json"))?)?)
        } else {
            None
        };
        let records = ingest_records_with_terms(open(&path("grades.csv"))?, terms.as_ref())?;
        let catalog = read_catalog(open(&path("catalog.json"))?)?;
        let features = match (path("students.csv").exists(), path("courses.csv").exists()) {
            (true, true) => Some(FeatureSource::read(
                open(&path("students.csv"))?,
                open(&path("courses.csv"))?,
                terms.as_ref(),
            )?),
            (false, false) => None,
            _ => {
                return Err(CliError::new(
                    Kind::Data,
                    "MissingFeatures",
                    "students.csv and courses.csv must be provided together",
                ))
            }
        };
        Ok(DataDir {
            records,
            catalog,
            features,
        })
    }

    pub fn entry(&self, target: &str) -> CliResult<&CatalogEntry> {
        self.catalog
            .iter()
            .find(|e| e.target_course == target)
            .ok_or_else(|| CliError::new(Kind::Data, "UnknownCourse", format!("course `{target}` is not a catalog target")))
    }

    /// Every record of one student as `(course, term, grade)`, in term order.
    pub fn transcript(&self, student: &str) -> CliResult<Vec<(String, u32, f64)>> {
        let mut rows: Vec<(String, u32, f64)> = self
            .records
            .iter()
            .filter(|r| r.student_id == student)
            .map(|r| (r.course_id.clone(), r.term, r.grade))
            .collect();
        if rows.is_empty() {
            return Err(CliError::new(
                Kind::Data,
                "UnknownStudent",
                format!("no records for student `{student}`"),
            ));
        }
        rows.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
        Ok(rows)
    }
}
