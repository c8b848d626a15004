//! Synthetic transcripts with planted prerequisite structure and a known
//! generative mean, used as ground truth for benchmarks.
//!
//! A grade in course `c` is
//! `snap(mu + a_s - d_c + sum_p w_pc (g_p - mu) + gamma (g_p1 - mu)(g_p2 - mu) + eps)`
//! where `p1`, `p2` are the two heaviest prerequisites. Prerequisites whose
//! weight reaches `hard_threshold` must be passed before enrolling; lighter
//! ones are optional and contribute nothing when untaken.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_records, CatalogEntry, CourseFeatures, FeatureSource, GradeRecord, StudentFeatures, TermMap};
use crate::error::{Error, Result};
use crate::grades::{clip, snap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prerequisite {
    pub course: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCourse {
    pub id: String,
    pub level: u32,
    pub discipline: String,
    pub credits: u32,
    pub difficulty: f64,
    pub prerequisites: Vec<Prerequisite>,
    /// Target courses get a model and a catalog entry.
    pub target: bool,
}

impl PlantedCourse {
    /// The two heaviest prerequisites, ties by id.
    pub fn heaviest_pair(&self) -> Option<(&str, &str)> {
        let mut p: Vec<&Prerequisite> = self.prerequisites.iter().collect();
        p.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.course.cmp(&b.course)));
        match p.as_slice() {
            [a, b, ..] => Some((&a.course, &b.course)),
            _ => None,
        }
    }

    pub fn heaviest(&self) -> Option<&Prerequisite> {
        self.prerequisites
            .iter()
            .min_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.course.cmp(&b.course)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub seed: u64,
    pub n_students: usize,
    pub n_terms: u32,
    /// Latest term a student may enter.
    pub max_entry_term: u32,
    /// Courses per level for a generated catalog; the last level holds the targets.
    pub level_sizes: Vec<usize>,
    pub min_target_priors: usize,
    pub max_target_priors: usize,
    pub dominant_weight: (f64, f64),
    pub second_weight: (f64, f64),
    pub minor_weight: (f64, f64),
    /// Non-target courses above the first level get 1 or 2 parents in this range.
    pub parent_weight: (f64, f64),
    pub hard_threshold: f64,
    pub mu: f64,
    pub ability_sd: f64,
    pub difficulty_sd: f64,
    pub noise_sd: f64,
    pub gamma: f64,
    pub min_load: usize,
    pub max_load: usize,
    /// Enrollment picks eligible courses by level plus `U[0, level_jitter)`,
    /// so larger values mix levels more.
    pub level_jitter: f64,
    pub majors: Vec<String>,
    pub disciplines: Vec<String>,
    /// Use this catalog instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<Vec<PlantedCourse>>,
}

impl GeneratorSpec {
    /// 800 students, 25 courses over four levels, 10 terms, five targets
    /// with 4 to 8 priors each.
    pub fn bench_small(seed: u64) -> Self {
        GeneratorSpec {
            name: "bench-small".into(),
            seed,
            n_students: 800,
            n_terms: 10,
            max_entry_term: 4,
            level_sizes: vec![8, 7, 5, 5],
            min_target_priors: 4,
            max_target_priors: 8,
            dominant_weight: (0.5, 0.6),
            second_weight: (0.15, 0.25),
            minor_weight: (0.0, 0.05),
            parent_weight: (0.15, 0.35),
            hard_threshold: 0.1,
            mu: 3.0,
            ability_sd: 0.55,
            difficulty_sd: 0.25,
            noise_sd: 0.3,
            gamma: 0.4,
            min_load: 3,
            max_load: 4,
            level_jitter: 3.0,
            majors: vec!["CS".into(), "ECE".into(), "MATH".into()],
            disciplines: vec!["CS".into(), "ECE".into(), "MATH".into()],
            catalog: None,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "bench-small" => Ok(Self::bench_small(seed)),
            other => Err(Error::InvalidSpec(format!("unknown generator preset `{other}`"))),
        }
    }

    fn validate_scalars(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_students == 0 || self.n_terms == 0 {
            return bad("need at least one student and one term");
        }
        if [self.ability_sd, self.difficulty_sd, self.noise_sd]
            .iter()
            .any(|s| s.is_nan() || *s < 0.0)
        {
            return bad("standard deviations must be non-negative");
        }
        if self.level_jitter.is_nan() || self.level_jitter < 0.0 {
            return bad("level jitter must be non-negative");
        }
        if self.min_load == 0 || self.min_load > self.max_load {
            return bad("course load range is empty");
        }
        if self.majors.is_empty() || self.disciplines.is_empty() {
            return bad("majors and disciplines must be non-empty");
        }
        for (lo, hi) in [self.dominant_weight, self.second_weight, self.minor_weight, self.parent_weight] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad("weight ranges must lie within [0, 1]");
            }
        }
        Ok(())
    }
}

/// Checks ids, weights and acyclicity; returns a topological order.
pub fn validate_catalog(courses: &[PlantedCourse]) -> Result<Vec<String>> {
    let ids: BTreeSet<&str> = courses.iter().map(|c| c.id.as_str()).collect();
    if ids.len() != courses.len() {
        return Err(Error::InvalidSpec("duplicate course id".into()));
    }
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in courses {
        let mut total = 0.0;
        for p in &c.prerequisites {
            if !ids.contains(p.course.as_str()) {
                return Err(Error::InvalidSpec(format!("`{}` requires unknown course `{}`", c.id, p.course)));
            }
            if !(0.0..=1.0).contains(&p.weight) {
                return Err(Error::InvalidSpec(format!("weight {} into `{}` is outside [0, 1]", p.weight, c.id)));
            }
            total += p.weight;
            *indegree.get_mut(c.id.as_str()).expect("known id") += 1;
            children.entry(p.course.as_str()).or_default().push(&c.id);
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidSpec(format!("weights into `{}` sum to {total}", c.id)));
        }
    }
    let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(i, _)| *i).collect();
    let mut order = Vec::with_capacity(courses.len());
    while let Some(id) = queue.pop_front() {
        order.push(id.to_string());
        for &child in children.get(id).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(child).expect("known id");
            *d -= 1;
            if *d == 0 {
                queue.push_back(child);
            }
        }
    }
    if order.len() != courses.len() {
        return Err(Error::InvalidSpec("prerequisite graph has a cycle".into()));
    }
    Ok(order)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn generate_catalog<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Result<Vec<PlantedCourse>> {
    if spec.level_sizes.len() < 2 {
        return Err(Error::InvalidSpec("need at least two course levels".into()));
    }
    let difficulty = Normal::new(0.0, spec.difficulty_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut courses: Vec<PlantedCourse> = Vec::new();
    let n_levels = spec.level_sizes.len();
    for (li, &size) in spec.level_sizes.iter().enumerate() {
        let level = li as u32 + 1;
        let below: Vec<String> = courses.iter().map(|c| c.id.clone()).collect();
        let prev_level: Vec<String> = courses.iter().filter(|c| c.level + 1 == level).map(|c| c.id.clone()).collect();
        let is_target = li + 1 == n_levels;
        for k in 0..size {
            let id = format!("C{level}{:02}", k + 1);
            let mut prerequisites = Vec::new();
            if is_target {
                let n = rng.random_range(spec.min_target_priors..=spec.max_target_priors).min(below.len());
                if n < 2 {
                    return Err(Error::InvalidSpec("targets need at least two priors".into()));
                }
                let mut chosen: Vec<String> = below.choose_multiple(rng, n).cloned().collect();
                chosen.sort();
                let mut roles: Vec<usize> = (0..n).collect();
                roles.shuffle(rng);
                let mut weights = vec![0.0; n];
                weights[roles[0]] = uniform(rng, spec.dominant_weight);
                weights[roles[1]] = uniform(rng, spec.second_weight);
                for &r in &roles[2..] {
                    weights[r] = uniform(rng, spec.minor_weight);
                }
                let total: f64 = weights.iter().sum();
                if total > 1.0 {
                    weights.iter_mut().for_each(|w| *w /= total);
                }
                prerequisites = chosen
                    .into_iter()
                    .zip(weights)
                    .map(|(course, weight)| Prerequisite { course, weight })
                    .collect();
            } else if !prev_level.is_empty() {
                let n = rng.random_range(1..=2usize).min(prev_level.len());
                let mut chosen: Vec<String> = prev_level.choose_multiple(rng, n).cloned().collect();
                chosen.sort();
                prerequisites = chosen
                    .into_iter()
                    .map(|course| Prerequisite {
                        course,
                        weight: uniform(rng, spec.parent_weight),
                    })
                    .collect();
            }
            courses.push(PlantedCourse {
                id,
                level,
                discipline: spec.disciplines.choose(rng).expect("non-empty").clone(),
                credits: rng.random_range(3..=4),
                difficulty: difficulty.sample(rng),
                prerequisites,
                target: is_target,
            });
        }
    }
    Ok(courses)
}

/// Exact generative parameters: the noise-free mean is the Bayes point predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleModel {
    pub mu: f64,
    pub gamma: f64,
    pub noise_sd: f64,
    pub hard_threshold: f64,
    pub courses: BTreeMap<String, PlantedCourse>,
    pub abilities: BTreeMap<String, f64>,
}

impl OracleModel {
    /// Noise-free mean before clipping. Missing prerequisites contribute 0;
    /// an unknown student has ability 0.
    pub fn raw_mean(&self, student: &str, latest: &BTreeMap<String, f64>, course: &str) -> Result<f64> {
        let c = self.courses.get(course).ok_or_else(|| Error::UnknownCourse(course.to_string()))?;
        let ability = self.abilities.get(student).copied().unwrap_or(0.0);
        let dev = |p: &str| latest.get(p).map_or(0.0, |g| g - self.mu);
        let mut g = self.mu + ability - c.difficulty;
        for p in &c.prerequisites {
            g += p.weight * dev(&p.course);
        }
        if let Some((a, b)) = c.heaviest_pair() {
            g += self.gamma * dev(a) * dev(b);
        }
        Ok(g)
    }

    /// Clipped noise-free mean.
    pub fn predict(&self, student: &str, latest: &BTreeMap<String, f64>, course: &str) -> Result<f64> {
        self.raw_mean(student, latest, course).map(clip)
    }

    /// Heaviest planted prerequisite of a course.
    pub fn dominant_prior(&self, course: &str) -> Option<&str> {
        self.courses.get(course)?.heaviest().map(|p| p.course.as_str())
    }
}

/// Everything a generator run produces.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub records: Vec<GradeRecord>,
    pub term_labels: BTreeMap<u32, String>,
    pub catalog: Vec<CatalogEntry>,
    pub features: FeatureSource,
    pub oracle: OracleModel,
}

impl GeneratedData {
    pub fn term_map(&self) -> TermMap {
        self.term_labels.iter().map(|(t, l)| (l.clone(), *t)).collect()
    }

    /// Latest grade per course for `student` over terms before `term`.
    pub fn latest_before(&self, student: &str, term: u32) -> BTreeMap<String, f64> {
        let mut latest: BTreeMap<String, (u32, f64)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.student_id == student && r.term < term) {
            let e = latest.entry(r.course_id.clone()).or_insert((r.term, r.grade));
            if r.term >= e.0 {
                *e = (r.term, r.grade);
            }
        }
        latest.into_iter().map(|(c, (_, g))| (c, g)).collect()
    }

    /// Writes `grades.csv`, `catalog.json`, `term_map.json`, `students.csv`,
    /// `courses.csv` and `oracle.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_records(&self.records, Some(&self.term_labels), fs::File::create(dir.join("grades.csv"))?)?;
        fs::write(dir.join("catalog.json"), serde_json::to_string_pretty(&self.catalog)? + "\n")?;
        fs::write(dir.join("term_map.json"), serde_json::to_string_pretty(&self.term_map())? + "\n")?;
        self.features.write(
            fs::File::create(dir.join("students.csv"))?,
            fs::File::create(dir.join("courses.csv"))?,
        )?;
        fs::write(dir.join("oracle.json"), serde_json::to_string_pretty(&self.oracle)? + "\n")?;
        Ok(())
    }
}

/// `Fall2009`, `Spring2010`, `Fall2010`, ...
pub fn term_label(term: u32) -> String {
    let season = if term.is_multiple_of(2) { "Fall" } else { "Spring" };
    format!("{season}{}", 2009 + term.div_ceil(2))
}

struct StudentState {
    id: String,
    ability: f64,
    entry: u32,
    major: String,
    /// Latest grade per course.
    latest: BTreeMap<String, f64>,
    grade_sum: f64,
    grade_count: usize,
}

/// Runs the generator.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedData> {
    spec.validate_scalars()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let catalog = match &spec.catalog {
        Some(c) => c.clone(),
        None => generate_catalog(spec, &mut rng)?,
    };
    validate_catalog(&catalog)?;
    let by_id: BTreeMap<String, PlantedCourse> = catalog.iter().map(|c| (c.id.clone(), c.clone())).collect();
    let oracle_courses = by_id.clone();

    let ability = Normal::new(0.0, spec.ability_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let width = (spec.n_students.max(1) - 1).to_string().len();
    let mut students: Vec<StudentState> = (0..spec.n_students)
        .map(|i| StudentState {
            id: format!("s{i:0width$}"),
            ability: ability.sample(&mut rng),
            entry: rng.random_range(0..=spec.max_entry_term.min(spec.n_terms - 1)),
            major: spec.majors.choose(&mut rng).expect("non-empty").clone(),
            latest: BTreeMap::new(),
            grade_sum: 0.0,
            grade_count: 0,
        })
        .collect();

    let oracle = OracleModel {
        mu: spec.mu,
        gamma: spec.gamma,
        noise_sd: spec.noise_sd,
        hard_threshold: spec.hard_threshold,
        courses: oracle_courses,
        abilities: students.iter().map(|s| (s.id.clone(), s.ability)).collect(),
    };

    let mut features = FeatureSource::new();
    for c in &catalog {
        features.insert_course(
            &c.id,
            CourseFeatures {
                level: c.level,
                discipline: c.discipline.clone(),
                credits: c.credits,
            },
        );
    }

    let mut records = Vec::new();
    for term in 0..spec.n_terms {
        for s in students.iter_mut().filter(|s| s.entry <= term) {
            features.insert_student(
                &s.id,
                term,
                StudentFeatures {
                    academic_level: term - s.entry + 1,
                    prior_gpa: if s.grade_count == 0 {
                        0.0
                    } else {
                        s.grade_sum / s.grade_count as f64
                    },
                    major: s.major.clone(),
                },
            );
            let passed = |c: &str, s: &StudentState| s.latest.get(c).is_some_and(|g| *g > 0.0);
            let mut eligible: Vec<(f64, &PlantedCourse)> = catalog
                .iter()
                .filter(|c| !passed(&c.id, s))
                .filter(|c| {
                    c.prerequisites
                        .iter()
                        .filter(|p| p.weight >= spec.hard_threshold)
                        .all(|p| passed(&p.course, s))
                })
                .map(|c| (c.level as f64 + uniform(&mut rng, (0.0, spec.level_jitter)), c))
                .collect();
            eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
            let load = rng.random_range(spec.min_load..=spec.max_load);
            let mut taken = Vec::new();
            for (_, c) in eligible.into_iter().take(load) {
                let mean = oracle.raw_mean(&s.id, &s.latest, &c.id)?;
                let grade = snap(mean + noise.sample(&mut rng));
                taken.push((c.id.clone(), grade));
            }
            for (course, grade) in taken {
                s.latest.insert(course.clone(), grade);
                s.grade_sum += grade;
                s.grade_count += 1;
                records.push(GradeRecord {
                    student_id: s.id.clone(),
                    course_id: course,
                    term,
                    grade,
                });
            }
        }
    }

    let catalog_entries = catalog
        .iter()
        .filter(|c| c.target)
        .map(|c| {
            let mut priors: Vec<String> = c.prerequisites.iter().map(|p| p.course.clone()).collect();
            priors.sort();
            CatalogEntry {
                target_course: c.id.clone(),
                priors,
            }
        })
        .collect();
    Ok(GeneratedData {
        records,
        term_labels: (0..spec.n_terms).map(|t| (t, term_label(t))).collect(),
        catalog: catalog_entries,
        features,
        oracle,
    })
}

/// A single target whose label is an exact linear function of its priors'
/// grades (no noise, no snapping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub seed: u64,
    pub n_students: usize,
    pub n_terms: u32,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearSpec {
    pub fn standard(seed: u64) -> Self {
        LinearSpec {
            seed,
            n_students: 600,
            n_terms: 6,
            weights: vec![0.45, 0.3, 0.15],
            intercept: 0.3,
        }
    }
}

/// Linear benchmark: every student takes all priors in their first term and
/// the target in a later term. Prior grades avoid F so the static encoding
/// equals the raw grade.
pub fn generate_linear(spec: &LinearSpec) -> Result<GeneratedData> {
    if spec.weights.is_empty() || spec.n_terms < 4 {
        return Err(Error::InvalidSpec("linear benchmark needs priors and at least four terms".into()));
    }
    let label_max = spec.intercept + spec.weights.iter().map(|w| w.max(0.0) * 4.0).sum::<f64>();
    let label_min = spec.intercept + spec.weights.iter().map(|w| w.min(0.0) * 4.0).sum::<f64>();
    if label_min < 0.0 || label_max > 4.0 {
        return Err(Error::InvalidSpec("linear labels would leave [0, 4]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = [1.0, 1.67, 2.0, 2.33, 2.67, 3.0, 3.33, 3.67, 4.0];
    let priors: Vec<String> = (0..spec.weights.len()).map(|i| format!("P{:02}", i + 1)).collect();
    let mut records = Vec::new();
    let mut courses = BTreeMap::new();
    for p in &priors {
        courses.insert(
            p.clone(),
            PlantedCourse {
                id: p.clone(),
                level: 1,
                discipline: "CS".into(),
                credits: 3,
                difficulty: 0.0,
                prerequisites: vec![],
                target: false,
            },
        );
    }
    courses.insert(
        "T01".into(),
        PlantedCourse {
            id: "T01".into(),
            level: 2,
            discipline: "CS".into(),
            credits: 3,
            difficulty: 0.0,
            prerequisites: priors
                .iter()
                .zip(&spec.weights)
                .map(|(p, w)| Prerequisite {
                    course: p.clone(),
                    weight: *w,
                })
                .collect(),
            target: true,
        },
    );
    let width = (spec.n_students.max(1) - 1).to_string().len();
    for i in 0..spec.n_students {
        let id = format!("s{i:0width$}");
        let start = rng.random_range(0..spec.n_terms - 1);
        let target_term = rng.random_range(start + 1..spec.n_terms);
        let mut label = spec.intercept;
        for (p, w) in priors.iter().zip(&spec.weights) {
            let g = *grid.choose(&mut rng).expect("non-empty");
            label += w * g;
            records.push(GradeRecord {
                student_id: id.clone(),
                course_id: p.clone(),
                term: start,
                grade: g,
            });
        }
        records.push(GradeRecord {
            student_id: id,
            course_id: "T01".into(),
            term: target_term,
            grade: clip(label),
        });
    }
    Ok(GeneratedData {
        records,
        term_labels: (0..spec.n_terms).map(|t| (t, term_label(t))).collect(),
        catalog: vec![CatalogEntry {
            target_course: "T01".into(),
            priors,
        }],
        features: FeatureSource::new(),
        oracle: OracleModel {
            mu: 0.0,
            gamma: 0.0,
            noise_sd: 0.0,
            hard_threshold: 1.0,
            courses,
            abilities: BTreeMap::new(),
        },
    })
}
