//! Replication studies: data source, knockoff generators, lasso statistics
//! and the filter, producing one record per (cell, generator, filter mode).
//!
//! Random streams are derived from the base seed and the cell coordinates:
//!
//! - the design for replication `r` from `[DATA, r]`;
//! - knockoffs of that design from `[KNOCKOFF, r, generator]`;
//! - the outcome from `[OUTCOME, r, m, rho bits]`.
//!
//! Within a replication every `(m, rho)` cell therefore sees the same design
//! and the same knockoffs, and every generator sees the same outcome. A cell
//! gives the same record whether it runs alone or inside a larger grid, and
//! the worker count never changes results.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataMatrix, KnockoffPair};
use crate::error::{Error, Result};
use crate::filter::{self, FeatureStats, FilterMode};
use crate::gaussian::{FixedXModel, SecondOrderModel};
use crate::hiv::{self, MutationDataset};
use crate::lasso::{self, Family, LassoProblem, PathOptions};
use crate::nn::AdamConfig;
use crate::rng::{derive_rng, derive_seed, label_id};
use crate::sim::{self, Setting1Options, Setting2Options, Support};
use crate::vae::{Preset, TrainingConfig};

const DATA: u64 = 1;
const KNOCKOFF: u64 = 2;
const OUTCOME: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Continuous non-Gaussian design.
    S1,
    /// Thresholded Gaussian design.
    S2,
    /// Real HIV outcomes, one analysis per drug.
    Hiv,
    /// HIV mutation design with a simulated outcome.
    HivSignal,
    /// A design read from `csv_path` with a simulated outcome.
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Generator {
    Vae(Preset),
    SecondOrder,
    FixedX,
}

impl Generator {
    /// Accepts `vae`, `vae:<preset>`, `catvae`, `second_order` and `fixed_x`.
    /// A bare `vae` picks the preset matching the source.
    pub fn parse(text: &str, source: Source) -> Result<Self> {
        let (kind, preset) = match text.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (text, None),
        };
        match (kind, preset) {
            ("vae" | "catvae", Some(p)) => Ok(Generator::Vae(Preset::parse(p)?)),
            ("catvae", None) => Ok(Generator::Vae(Preset::HivCatVae)),
            ("vae", None) => match source {
                Source::S1 => Ok(Generator::Vae(Preset::S1Vae)),
                Source::S2 => Ok(Generator::Vae(Preset::S2Vae)),
                Source::Hiv | Source::HivSignal => Ok(Generator::Vae(Preset::HivCatVae)),
                Source::Csv => Err(Error::Config(
                    "`vae` with a csv source needs a preset, e.g. `vae:s1-vae`".into(),
                )),
            },
            ("second_order", None) => Ok(Generator::SecondOrder),
            ("fixed_x", None) => Ok(Generator::FixedX),
            _ => Err(Error::Config(format!("unknown generator `{text}`"))),
        }
    }

    pub fn label(self) -> String {
        match self {
            Generator::Vae(p) => format!("vae:{}", p.name()),
            Generator::SecondOrder => "second_order".into(),
            Generator::FixedX => "fixed_x".into(),
        }
    }

    /// Model-X generators can be built once on a full design and subset afterwards.
    fn is_model_x(self) -> bool {
        !matches!(self, Generator::FixedX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        let d = TrainingConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.optimizer.learning_rate,
        }
    }
}

impl TrainingOptions {
    fn config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: Source,
    pub csv_path: Option<PathBuf>,
    pub hiv_dir: PathBuf,
    /// Drugs analysed with `source = "hiv"`; empty means all.
    pub drugs: Vec<String>,
    pub n: usize,
    pub p: usize,
    pub family: Family,
    pub support: Support,
    pub generators: Vec<String>,
    pub filters: Vec<FilterMode>,
    pub q: f64,
    pub m: Vec<usize>,
    pub rho: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
    pub output: Option<PathBuf>,
    pub training: TrainingOptions,
    pub lasso: PathOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: Source::S1,
            csv_path: None,
            hiv_dir: PathBuf::from("data/hiv-sample"),
            drugs: Vec::new(),
            n: 200,
            p: 100,
            family: Family::Gaussian,
            support: Support::Leading,
            generators: vec!["vae".into(), "second_order".into(), "fixed_x".into()],
            filters: vec![FilterMode::KnockoffPlus],
            q: 0.1,
            m: vec![10],
            rho: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            replications: 100,
            seed: 1,
            parallelism: 0,
            output: None,
            training: TrainingOptions::default(),
            lasso: PathOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn parsed_generators(&self) -> Result<Vec<Generator>> {
        let mut out = Vec::new();
        for text in &self.generators {
            let g = Generator::parse(text, self.source)?;
            if out.contains(&g) {
                return Err(Error::Config(format!("generator `{}` listed twice", g.label())));
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Checks the invariants and rewrites generator names in canonical form.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if !(cfg.q > 0.0 && cfg.q < 1.0) {
            return Err(Error::Config(format!("q must lie in (0, 1), got {}", cfg.q)));
        }
        if cfg.generators.is_empty() || cfg.filters.is_empty() {
            return Err(Error::Config("generators and filters must be nonempty".into()));
        }
        if cfg.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        cfg.generators = cfg.parsed_generators()?.into_iter().map(Generator::label).collect();
        let mut filters = cfg.filters.clone();
        filters.sort();
        filters.dedup();
        cfg.filters = filters;
        match cfg.source {
            Source::Hiv => {
                cfg.m.clear();
                cfg.rho.clear();
                cfg.family = Family::Gaussian;
            }
            _ => {
                if cfg.m.is_empty() || cfg.rho.is_empty() {
                    return Err(Error::Config("m and rho grids must be nonempty".into()));
                }
                if let Some(r) = cfg.rho.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
                    return Err(Error::Config(format!("rho must be finite and nonnegative, got {r}")));
                }
                if matches!(cfg.source, Source::S1 | Source::S2) {
                    if let Some(m) = cfg.m.iter().find(|&&m| m > cfg.p) {
                        return Err(Error::Config(format!("m = {m} exceeds p = {}", cfg.p)));
                    }
                }
                if cfg.source == Source::Csv && cfg.csv_path.is_none() {
                    return Err(Error::Config("csv source needs csv_path".into()));
                }
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the resolved configuration without the fields that cannot
    /// change results (output location and worker count).
    pub fn content_hash(&self) -> Result<String> {
        let mut c = self.resolved()?;
        c.output = None;
        c.parallelism = 0;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// One filter outcome. Simulation records carry fdp and power; HIV records
/// carry the drug and the TSM overlap instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub drug: String,
    pub generator: String,
    pub filter: FilterMode,
    pub q: f64,
    pub m: usize,
    pub rho: f64,
    pub replication: usize,
    pub n: usize,
    pub p: usize,
    pub selected: usize,
    pub true_discoveries: Option<usize>,
    pub false_discoveries: Option<usize>,
    pub fdp: Option<f64>,
    pub power: Option<f64>,
    pub tsm_matched: Option<usize>,
    pub threshold: f64,
    /// Selected variable names joined by `;`.
    pub selected_variables: String,
}

impl Record {
    fn sort_key(&self) -> (&str, &str, FilterMode, usize, u64, usize) {
        (
            &self.drug,
            &self.generator,
            self.filter,
            self.m,
            self.rho.to_bits(),
            self.replication,
        )
    }
}

pub fn sort_records(records: &mut [Record]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then(a.q.total_cmp(&b.q)));
}

pub fn write_records<W: Write>(out: W, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<Record>> {
    let mut reader = csv::Reader::from_reader(input);
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Knockoffs for `x` from one generator, all randomness derived from `seed`.
pub fn generate(generator: Generator, x: &DataMatrix, seed: u64, training: &TrainingOptions) -> Result<KnockoffPair> {
    let mut rng = derive_rng(seed, &[2]);
    match generator {
        Generator::Vae(preset) => {
            let mut model = preset.build(x.ncols(), derive_seed(seed, &[0]))?;
            model.train(x, &training.config(derive_seed(seed, &[1])))?;
            model.generate_knockoffs(x, &mut rng)
        }
        Generator::SecondOrder => SecondOrderModel::fit(x)?.sample(x, &mut rng),
        Generator::FixedX => FixedXModel::fit(x, &mut rng)?.sample(x),
    }
}

/// Signed-max-lambda statistics from the lasso path on `[X, X~]`.
pub fn lasso_statistics(
    pair: &KnockoffPair,
    y: &Array1<f64>,
    family: Family,
    opts: &PathOptions,
) -> Result<FeatureStats> {
    let problem = LassoProblem::new(pair.augmented_design(), y.clone(), family)?;
    let path = lasso::solve_path(&problem, opts)?;
    filter::from_entry_lambdas(path.entry_lambdas().view())
}

struct CellOutcome<'a> {
    drug: &'a str,
    m: usize,
    rho: f64,
    replication: usize,
    truth: Option<&'a [usize]>,
    tsm: Option<&'a std::collections::BTreeSet<u32>>,
}

fn records_for(
    cfg: &ExperimentConfig,
    generator: Generator,
    pair: &KnockoffPair,
    stats: &FeatureStats,
    cell: &CellOutcome<'_>,
) -> Result<Vec<Record>> {
    let names = pair.original.names();
    let mut out = Vec::new();
    for &mode in &cfg.filters {
        let sel = filter::threshold(stats.w.view(), cfg.q, mode)?;
        let chosen: Vec<&str> = sel.selected.iter().map(|&j| names[j].as_str()).collect();
        let score = cell.truth.map(|t| filter::score(&sel.selected, t));
        out.push(Record {
            drug: cell.drug.to_string(),
            generator: generator.label(),
            filter: mode,
            q: cfg.q,
            m: cell.m,
            rho: cell.rho,
            replication: cell.replication,
            n: pair.original.nrows(),
            p: pair.p(),
            selected: sel.selected.len(),
            true_discoveries: score.map(|s| s.true_discoveries),
            false_discoveries: score.map(|s| s.false_discoveries),
            fdp: score.map(|s| s.fdp),
            power: score.map(|s| s.power),
            tsm_matched: cell.tsm.map(|t| hiv::tsm_overlap(&chosen, t).matched),
            threshold: sel.threshold,
            selected_variables: chosen.join(";"),
        });
    }
    Ok(out)
}

enum Design {
    Generated(Source),
    Fixed(DataMatrix),
}

impl Design {
    fn draw(&self, cfg: &ExperimentConfig, replication: usize) -> Result<DataMatrix> {
        let mut rng = derive_rng(cfg.seed, &[DATA, replication as u64]);
        match self {
            Design::Generated(Source::S1) => sim::setting1(cfg.n, cfg.p, &Setting1Options::default(), &mut rng),
            Design::Generated(_) => sim::setting2(cfg.n, cfg.p, &Setting2Options::default(), &mut rng),
            Design::Fixed(x) => Ok(x.clone()),
        }
    }
}

fn simulation_replication(
    cfg: &ExperimentConfig,
    generators: &[Generator],
    design: &Design,
    r: usize,
) -> Result<Vec<Record>> {
    let x = design
        .draw(cfg, r)
        .map_err(|e| e.in_context(format!("replication {r}: design")))?;
    for &m in &cfg.m {
        if m > x.ncols() {
            return Err(Error::Config(format!("m = {m} exceeds p = {}", x.ncols())));
        }
    }
    let pairs = generators
        .iter()
        .map(|&g| {
            let seed = derive_seed(cfg.seed, &[KNOCKOFF, r as u64, label_id(&g.label())]);
            generate(g, &x, seed, &cfg.training)
                .map_err(|e| e.in_context(format!("replication {r}, generator {}", g.label())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &m in &cfg.m {
        for &rho in &cfg.rho {
            let context = |g: Generator| format!("replication {r}, m {m}, rho {rho}, generator {}", g.label());
            let mut rng = derive_rng(cfg.seed, &[OUTCOME, r as u64, m as u64, rho.to_bits()]);
            let outcome = sim::generate_outcome(&x, m, rho, cfg.family, cfg.support, &mut rng)?;
            for (&g, pair) in generators.iter().zip(&pairs) {
                let cell = CellOutcome {
                    drug: "",
                    m,
                    rho,
                    replication: r,
                    truth: Some(&outcome.truth),
                    tsm: None,
                };
                let stats =
                    lasso_statistics(pair, &outcome.y, cfg.family, &cfg.lasso).map_err(|e| e.in_context(context(g)))?;
                out.extend(records_for(cfg, g, pair, &stats, &cell).map_err(|e| e.in_context(context(g)))?);
            }
        }
    }
    log::info!("replication {r} done");
    Ok(out)
}

/// The rows and columns of a full-design pair that belong to one drug.
fn restrict(pair: &KnockoffPair, view: &hiv::DrugView) -> Result<KnockoffPair> {
    let knockoff = pair
        .knockoff
        .values()
        .select(Axis(0), &view.rows)
        .select(Axis(1), &view.columns);
    KnockoffPair::new(view.design.clone(), knockoff, pair.generator.clone())
}

fn hiv_replication(
    cfg: &ExperimentConfig,
    generators: &[Generator],
    data: &MutationDataset,
    drugs: &[String],
    r: usize,
) -> Result<Vec<Record>> {
    let full = data.design()?;
    let mut global = BTreeMap::new();
    for &g in generators.iter().filter(|g| g.is_model_x()) {
        let seed = derive_seed(cfg.seed, &[KNOCKOFF, r as u64, label_id(&g.label())]);
        let pair = generate(g, &full, seed, &cfg.training)
            .map_err(|e| e.in_context(format!("replication {r}, generator {}", g.label())))?;
        global.insert(g, pair);
    }
    let mut out = Vec::new();
    for drug in drugs {
        let view = data.per_drug_view(drug)?;
        for &g in generators {
            let context = || format!("replication {r}, drug {drug}, generator {}", g.label());
            let pair = match global.get(&g) {
                Some(full_pair) => restrict(full_pair, &view)?,
                None => {
                    let seed = derive_seed(cfg.seed, &[KNOCKOFF, r as u64, label_id(&g.label()), label_id(drug)]);
                    generate(g, &view.design, seed, &cfg.training).map_err(|e| e.in_context(context()))?
                }
            };
            let stats = lasso_statistics(&pair, &view.response, Family::Gaussian, &cfg.lasso)
                .map_err(|e| e.in_context(context()))?;
            let cell = CellOutcome {
                drug,
                m: 0,
                rho: 0.0,
                replication: r,
                truth: None,
                tsm: Some(data.tsm_positions()),
            };
            out.extend(records_for(cfg, g, &pair, &stats, &cell)?);
        }
    }
    log::info!("hiv replication {r} done");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub records: Vec<Record>,
    pub summary: Summary,
}

/// Runs every replication, then writes `records.csv`, `summary.csv`,
/// `hiv_table.csv` (HIV runs), `config.toml` and `config.sha256` when an
/// output directory is configured. If a cell fails, the records of the
/// replications that finished are still written before the error returns.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let cfg = config.resolved()?;
    let hash = cfg.content_hash()?;
    let generators = cfg.parsed_generators()?;
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        std::fs::write(dir.join("config.sha256"), format!("{hash}\n"))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<Record>>> = match cfg.source {
        Source::Hiv => {
            let data = MutationDataset::load_dir(&cfg.hiv_dir)?;
            let drugs = if cfg.drugs.is_empty() {
                data.drugs().to_vec()
            } else {
                cfg.drugs.clone()
            };
            pool.install(|| {
                (0..cfg.replications)
                    .into_par_iter()
                    .map(|r| hiv_replication(&cfg, &generators, &data, &drugs, r))
                    .collect()
            })
        }
        source => {
            let design = match source {
                Source::S1 | Source::S2 => Design::Generated(source),
                Source::HivSignal => Design::Fixed(MutationDataset::load_dir(&cfg.hiv_dir)?.design()?),
                Source::Csv => {
                    let path = cfg.csv_path.as_deref().expect("checked by resolved()");
                    Design::Fixed(DataMatrix::read_csv_file(path)?.0)
                }
                Source::Hiv => unreachable!(),
            };
            pool.install(|| {
                (0..cfg.replications)
                    .into_par_iter()
                    .map(|r| simulation_replication(&cfg, &generators, &design, r))
                    .collect()
            })
        }
    };

    let mut records = Vec::new();
    let mut first_error = None;
    for result in results {
        match result {
            Ok(rs) => records.extend(rs),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    sort_records(&mut records);
    if let Some(dir) = &cfg.output {
        write_records(
            std::io::BufWriter::new(std::fs::File::create(dir.join("records.csv"))?),
            &records,
        )?;
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let summary = summarize(&records)?;
    if let Some(dir) = &cfg.output {
        summary.write(dir)?;
    }
    Ok(ExperimentOutput {
        config: cfg,
        config_hash: hash,
        records,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub generator: String,
    pub filter: FilterMode,
    pub q: f64,
    pub m: usize,
    pub rho: f64,
    pub replications: usize,
    pub fdr: f64,
    pub fdr_se: f64,
    pub power: f64,
    pub power_se: f64,
    /// `E[V] / (E[R] + 1/q)`.
    pub mfdr: f64,
    /// Set when a single replication leaves the standard errors undefined
    /// (they are reported as 0).
    pub se_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HivRow {
    pub drug: String,
    pub generator: String,
    pub filter: FilterMode,
    pub replication: usize,
    pub n: usize,
    pub matched: usize,
    pub selected: usize,
    /// `matched/selected`, or `0` when nothing was selected.
    pub cell: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub curves: Vec<SummaryRow>,
    pub hiv: Vec<HivRow>,
}

impl Summary {
    pub fn write(&self, dir: &Path) -> Result<()> {
        if !self.curves.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
            for row in &self.curves {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        if !self.hiv.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("hiv_table.csv"))?;
            for row in &self.hiv {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Mean and standard error `sd / sqrt(n)` with the `n - 1` variance.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-(generator, filter, q, m, rho) means for simulation records; the
/// matched/selected table for HIV records. Depends only on the records.
pub fn summarize(records: &[Record]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Empty("no records to summarize".into()));
    }
    let mut groups: BTreeMap<(String, FilterMode, u64, usize, u64), Vec<&Record>> = BTreeMap::new();
    let mut hiv = Vec::new();
    for r in records {
        if let (Some(_), Some(_)) = (r.fdp, r.power) {
            groups
                .entry((r.generator.clone(), r.filter, r.q.to_bits(), r.m, r.rho.to_bits()))
                .or_default()
                .push(r);
        }
        if let Some(matched) = r.tsm_matched {
            let overlap = hiv::TsmOverlap {
                matched,
                selected: r.selected,
            };
            hiv.push(HivRow {
                drug: r.drug.clone(),
                generator: r.generator.clone(),
                filter: r.filter,
                replication: r.replication,
                n: r.n,
                matched,
                selected: r.selected,
                cell: overlap.to_string(),
            });
        }
    }
    let mut curves: Vec<SummaryRow> = groups
        .into_values()
        .map(|rs| {
            let fdps: Vec<f64> = rs.iter().filter_map(|r| r.fdp).collect();
            let powers: Vec<f64> = rs.iter().filter_map(|r| r.power).collect();
            let (fdr, fdr_se) = mean_se(&fdps);
            let (power, power_se) = mean_se(&powers);
            let k = rs.len() as f64;
            let v = rs.iter().filter_map(|r| r.false_discoveries).sum::<usize>() as f64 / k;
            let sel = rs.iter().map(|r| r.selected).sum::<usize>() as f64 / k;
            let first = rs[0];
            SummaryRow {
                generator: first.generator.clone(),
                filter: first.filter,
                q: first.q,
                m: first.m,
                rho: first.rho,
                replications: rs.len(),
                fdr,
                fdr_se,
                power,
                power_se,
                mfdr: v / (sel + 1.0 / first.q),
                se_undefined: rs.len() < 2,
            }
        })
        .collect();
    curves.sort_by(|a, b| {
        (&a.generator, a.filter, a.m)
            .cmp(&(&b.generator, b.filter, b.m))
            .then(a.q.total_cmp(&b.q))
            .then(a.rho.total_cmp(&b.rho))
    });
    Ok(Summary { curves, hiv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fdp: f64, power: f64) -> Record {
        Record {
            drug: String::new(),
            generator: "second_order".into(),
            filter: FilterMode::KnockoffPlus,
            q: 0.1,
            m: 10,
            rho: 2.0,
            replication: 0,
            n: 200,
            p: 100,
            selected: 2,
            true_discoveries: Some(1),
            false_discoveries: Some(1),
            fdp: Some(fdp),
            power: Some(power),
            tsm_matched: None,
            threshold: 1.0,
            selected_variables: "X1;X2".into(),
        }
    }

    fn quick(source: Source) -> ExperimentConfig {
        ExperimentConfig {
            source,
            n: 60,
            p: 10,
            generators: vec!["second_order".into(), "fixed_x".into()],
            filters: vec![FilterMode::Knockoff, FilterMode::KnockoffPlus],
            m: vec![3],
            rho: vec![0.0, 3.0],
            replications: 3,
            parallelism: 1,
            lasso: PathOptions {
                grid_size: 40,
                ..PathOptions::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn single_record_summary_flags_se() {
        let s = summarize(&[record(0.5, 1.0)]).unwrap();
        let row = &s.curves[0];
        assert_eq!((row.fdr, row.power, row.fdr_se), (0.5, 1.0, 0.0));
        assert!(row.se_undefined);
    }

    #[test]
    fn two_record_summary() {
        let mut b = record(1.0, 0.0);
        b.replication = 1;
        let s = summarize(&[record(0.0, 1.0), b]).unwrap();
        let row = &s.curves[0];
        assert_eq!(row.fdr, 0.5);
        assert!((row.fdr_se - 0.5).abs() < 1e-15);
        assert!(!row.se_undefined);
        // E[V] = 1, E[R] = 2.
        assert!((row.mfdr - 1.0 / 12.0).abs() < 1e-15);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn empty_hiv_selection_prints_zero() {
        let mut r = record(0.0, 0.0);
        r.fdp = None;
        r.power = None;
        r.drug = "APV".into();
        r.selected = 0;
        r.tsm_matched = Some(0);
        let s = summarize(&[r]).unwrap();
        assert!(s.curves.is_empty());
        assert_eq!(s.hiv[0].cell, "0");
    }

    #[test]
    fn generator_names_resolve() {
        assert_eq!(
            Generator::parse("vae", Source::S2).unwrap(),
            Generator::Vae(Preset::S2Vae)
        );
        assert_eq!(
            Generator::parse("catvae", Source::S1).unwrap(),
            Generator::Vae(Preset::HivCatVae)
        );
        assert_eq!(
            Generator::parse("vae:s1-vae", Source::Csv).unwrap().label(),
            "vae:s1-vae"
        );
        assert!(Generator::parse("vae", Source::Csv).is_err());
        assert!(Generator::parse("lasso", Source::S1).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.resolved().is_ok());
        for bad in [
            ExperimentConfig { q: 1.0, ..ok.clone() },
            ExperimentConfig {
                rho: vec![],
                ..ok.clone()
            },
            ExperimentConfig {
                m: vec![101],
                ..ok.clone()
            },
            ExperimentConfig {
                replications: 0,
                ..ok.clone()
            },
            ExperimentConfig {
                rho: vec![-1.0],
                ..ok.clone()
            },
            ExperimentConfig {
                generators: vec!["fixed_x".into(), "fixed_x".into()],
                ..ok.clone()
            },
            ExperimentConfig {
                source: Source::Csv,
                generators: vec!["second_order".into()],
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.resolved().unwrap_err(), Error::Config(_)), "{bad:?}");
        }
    }

    #[test]
    fn toml_round_trip_and_hash_ignores_output() {
        let cfg = ExperimentConfig::from_toml("source = \"s2\"\nrho = [1.0]\nm = [5]\nreplications = 2\n").unwrap();
        assert_eq!(cfg.source, Source::S2);
        assert_eq!(cfg.n, 200);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        let moved = ExperimentConfig {
            output: Some("elsewhere".into()),
            parallelism: 8,
            ..cfg.clone()
        };
        assert_eq!(cfg.content_hash().unwrap(), moved.content_hash().unwrap());
        let reseeded = ExperimentConfig { seed: 2, ..cfg.clone() };
        assert_ne!(cfg.content_hash().unwrap(), reseeded.content_hash().unwrap());
        assert!(ExperimentConfig::from_toml("sorce = \"s1\"").is_err());
    }

    #[test]
    fn null_cell_records_fdp_zero_on_empty_selection() {
        let cfg = ExperimentConfig {
            replications: 1,
            rho: vec![0.0],
            generators: vec!["second_order".into()],
            filters: vec![FilterMode::KnockoffPlus],
            ..quick(Source::S1)
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        if r.selected == 0 {
            assert_eq!(r.fdp, Some(0.0));
        }
    }

    #[test]
    fn cells_are_isolated_from_the_grid() {
        let full = run_experiment(&quick(Source::S1)).unwrap();
        let alone = ExperimentConfig {
            rho: vec![3.0],
            replications: 3,
            parallelism: 2,
            ..quick(Source::S1)
        };
        let alone = run_experiment(&alone).unwrap();
        let subset: Vec<_> = full.records.iter().filter(|r| r.rho == 3.0).cloned().collect();
        assert_eq!(subset, alone.records);
    }

    #[test]
    fn records_and_summary_files_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let cfg = ExperimentConfig {
                output: Some(dir.path().to_path_buf()),
                ..quick(Source::S2)
            };
            run_experiment(&cfg).unwrap();
        }
        for file in ["records.csv", "summary.csv", "config.sha256"] {
            let x = std::fs::read(a.path().join(file)).unwrap();
            let y = std::fs::read(b.path().join(file)).unwrap();
            assert_eq!(x, y, "{file}");
        }
        let records = read_records(std::fs::File::open(a.path().join("records.csv")).unwrap()).unwrap();
        assert_eq!(records.len(), 3 * 2 * 2 * 2);
        let summary = summarize(&records).unwrap();
        assert_eq!(summary.curves.len(), 2 * 2 * 2);
    }

    #[test]
    fn failures_carry_cell_context_and_flush_partial_records() {
        let dir = tempfile::tempdir().unwrap();
        // Fixed-X needs n >= 2p, so every replication fails in the generator.
        let cfg = ExperimentConfig {
            n: 15,
            output: Some(dir.path().to_path_buf()),
            ..quick(Source::S1)
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.kind(), "unsupported");
        assert!(err.to_string().contains("replication 0, generator fixed_x"), "{err}");
        assert!(dir.path().join("records.csv").exists());
    }

    #[test]
    fn hiv_sample_runs_end_to_end() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hiv-sample");
        let cfg = ExperimentConfig {
            source: Source::Hiv,
            hiv_dir: dir,
            drugs: vec!["APV".into()],
            generators: vec!["second_order".into(), "fixed_x".into()],
            filters: vec![FilterMode::Knockoff, FilterMode::KnockoffPlus],
            q: 0.2,
            replications: 1,
            parallelism: 1,
            ..ExperimentConfig::default()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.summary.hiv.len(), 4);
        for row in &out.summary.hiv {
            assert!(row.matched <= row.selected);
        }
    }
}
