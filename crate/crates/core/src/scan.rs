//! Triplet scan over three omics views: bundle loading and saving, per-gene
//! kernels, the scan loop with checkpoints, and the result files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::inference::{composite_score_test, overall_score_test, CompositeOptions};
use crate::kernels::{DataView, ViewKind};
use crate::mixed_model::{assemble_components, reml_fit, RemlOptions};
use crate::pipeline::{center_view, KernelConfig, LossConfig, PipelineConfig};
use crate::robust_center::{KirwlsOptions, RobustCentering};

/// Significance thresholds reported in the manifest.
pub const THRESHOLDS: [f64; 6] = [0.05, 0.01, 1e-3, 1e-4, 1e-5, 1e-6];

const NA: &str = "NA";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaPolicy {
    #[default]
    Fail,
    DropFeature,
    /// Replace missing entries by the feature mean; continuous views only.
    MeanImpute,
}

impl std::str::FromStr for NaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fail" => Ok(NaPolicy::Fail),
            "drop_feature" => Ok(NaPolicy::DropFeature),
            "mean_impute" => Ok(NaPolicy::MeanImpute),
            other => Err(Error::InvalidArgument(format!("unknown NA policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundlePaths {
    pub views: [PathBuf; 3],
    pub gene_maps: [PathBuf; 3],
    pub pheno: PathBuf,
    pub covar: Option<PathBuf>,
}

/// Three aligned views with gene annotation, outcome and covariates. All
/// sample-indexed data share the order of `sample_ids`, which is sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicsBundle {
    pub sample_ids: Vec<String>,
    pub views: [DataView; 3],
    /// Feature id to gene, per view.
    pub gene_maps: [BTreeMap<String, String>; 3],
    pub phenotype_name: String,
    pub phenotype: DVector<f64>,
    pub covariate_names: Vec<String>,
    /// Covariates without the intercept column.
    pub covariates: DMatrix<f64>,
}

/// One gene's block of feature columns within a view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneBlock {
    pub gene: String,
    pub columns: Vec<usize>,
}

impl OmicsBundle {
    pub fn samples(&self) -> usize {
        self.sample_ids.len()
    }

    /// `[1, covariates]`.
    pub fn design(&self) -> DMatrix<f64> {
        let n = self.samples();
        let c = self.covariates.ncols();
        DMatrix::from_fn(n, c + 1, |i, j| if j == 0 { 1.0 } else { self.covariates[(i, j - 1)] })
    }

    /// Genes of view `v` in lexicographic order.
    pub fn genes(&self, v: usize) -> Vec<GeneBlock> {
        let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, f) in self.views[v].feature_ids().iter().enumerate() {
            if let Some(g) = self.gene_maps[v].get(f) {
                blocks.entry(g.as_str()).or_default().push(j);
            }
        }
        blocks.into_iter().map(|(g, columns)| GeneBlock { gene: g.to_string(), columns }).collect()
    }

    /// The sub-view holding one gene's features.
    pub fn gene_view(&self, v: usize, block: &GeneBlock) -> Result<DataView> {
        let view = &self.views[v];
        let values = view.values().select_columns(&block.columns);
        let ids = block.columns.iter().map(|&j| view.feature_ids()[j].clone()).collect();
        DataView::new(values, view.kind(), ids)
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), msg: msg.into() }
}

fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| parse_err(path, e.to_string()))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn parse_value(path: &Path, token: &str) -> Result<Option<f64>> {
    let t = token.trim();
    if t.is_empty() || t == "NA" || t == "NaN" || t == "nan" {
        return Ok(None);
    }
    let v: f64 = t.parse().map_err(|_| parse_err(path, format!("cannot parse `{t}` as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, format!("non-finite value `{t}`")));
    }
    Ok(Some(v))
}

fn unique_ids(path: &Path, ids: impl IntoIterator<Item = String>, what: &str) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for id in ids {
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, format!("duplicated {what} `{id}`")));
        }
        out.push(id);
    }
    Ok(out)
}

struct RawView {
    samples: Vec<String>,
    features: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

fn read_view(path: &Path) -> Result<RawView> {
    let (header, rows) = read_tsv(path)?;
    if header.len() < 2 {
        return Err(parse_err(path, "header needs a feature column and at least one sample"));
    }
    let samples = unique_ids(path, header[1..].iter().cloned(), "sample id")?;
    let features = unique_ids(path, rows.iter().map(|r| r[0].clone()), "feature id")?;
    let values = rows
        .iter()
        .map(|r| r[1..].iter().map(|t| parse_value(path, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(RawView { samples, features, values })
}

/// Rows keyed by their first column; rows with any missing value are dropped.
fn read_keyed(path: &Path) -> Result<(Vec<String>, BTreeMap<String, Vec<f64>>)> {
    let (header, rows) = read_tsv(path)?;
    if header.is_empty() {
        return Err(parse_err(path, "empty header"));
    }
    unique_ids(path, rows.iter().map(|r| r[0].clone()), "sample id")?;
    let mut out = BTreeMap::new();
    for r in &rows {
        let vals = r[1..].iter().map(|t| parse_value(path, t)).collect::<Result<Vec<_>>>()?;
        if vals.iter().all(Option::is_some) {
            out.insert(r[0].clone(), vals.into_iter().flatten().collect());
        } else {
            log::info!("{}: sample `{}` has missing values and is dropped", path.display(), r[0]);
        }
    }
    Ok((header[1..].to_vec(), out))
}

fn read_gene_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let (header, rows) = read_tsv(path)?;
    if header.len() != 2 {
        return Err(parse_err(path, "gene map needs exactly two columns: feature id and gene"));
    }
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r[0].clone(), r[1].clone()).is_some() {
            return Err(parse_err(path, format!("duplicated feature id `{}`", r[0])));
        }
    }
    Ok(map)
}

/// Reads a bundle. Samples are intersected across every file and sorted;
/// `na_policy` decides what happens to view features with missing entries.
pub fn load_bundle(paths: &BundlePaths, kinds: [ViewKind; 3], na_policy: NaPolicy) -> Result<OmicsBundle> {
    let raw = paths.views.iter().map(|p| read_view(p)).collect::<Result<Vec<_>>>()?;
    let maps = paths.gene_maps.iter().map(|p| read_gene_map(p)).collect::<Result<Vec<_>>>()?;
    let (pheno_header, pheno) = read_keyed(&paths.pheno)?;
    if pheno_header.len() != 1 {
        return Err(parse_err(&paths.pheno, "phenotype file needs exactly two columns: sample id and value"));
    }
    let covar = paths.covar.as_ref().map(|p| read_keyed(p)).transpose()?;

    let mut sets: Vec<(String, BTreeSet<String>)> = raw
        .iter()
        .enumerate()
        .map(|(v, r)| (format!("view {}", v + 1), r.samples.iter().cloned().collect()))
        .collect();
    sets.push(("phenotype".into(), pheno.keys().cloned().collect()));
    if let Some((_, c)) = &covar {
        sets.push(("covariates".into(), c.keys().cloned().collect()));
    }
    let mut common = sets[0].1.clone();
    let mut common_name = sets[0].0.clone();
    for (name, set) in &sets[1..] {
        let next: BTreeSet<String> = common.intersection(set).cloned().collect();
        if next.is_empty() {
            return Err(Error::EmptyIntersection {
                left_name: common_name,
                left: common.len(),
                right_name: name.clone(),
                right: set.len(),
            });
        }
        common = next;
        common_name = format!("{common_name} and {name}");
    }
    let sample_ids: Vec<String> = common.into_iter().collect();
    let n = sample_ids.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("only {n} samples are shared by every input")));
    }

    let mut views = Vec::with_capacity(3);
    let mut gene_maps = Vec::with_capacity(3);
    for (v, (rv, map)) in raw.into_iter().zip(maps).enumerate() {
        let path = &paths.views[v];
        let kind = kinds[v];
        let col: HashMap<&str, usize> = rv.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let order: Vec<usize> = sample_ids.iter().map(|s| col[s.as_str()]).collect();
        let mut kept_ids = Vec::new();
        let mut kept_cols: Vec<Vec<f64>> = Vec::new();
        for (f, row) in rv.features.iter().zip(&rv.values) {
            if !map.contains_key(f) {
                log::warn!("{}: feature `{f}` has no gene and is dropped", path.display());
                continue;
            }
            let aligned: Vec<Option<f64>> = order.iter().map(|&i| row[i]).collect();
            let missing = aligned.iter().filter(|x| x.is_none()).count();
            let values: Vec<f64> = if missing == 0 {
                aligned.into_iter().flatten().collect()
            } else {
                match na_policy {
                    NaPolicy::Fail => {
                        return Err(Error::MissingValue { what: path.display().to_string(), feature: f.clone() })
                    }
                    NaPolicy::DropFeature => {
                        log::info!("{}: feature `{f}` has {missing} missing values and is dropped", path.display());
                        continue;
                    }
                    NaPolicy::MeanImpute => {
                        if kind == ViewKind::Genotype {
                            return Err(Error::InvalidArgument(format!(
                                "{}: mean imputation applies to continuous views only (feature `{f}`)",
                                path.display()
                            )));
                        }
                        if missing == n {
                            return Err(Error::MissingValue { what: path.display().to_string(), feature: f.clone() });
                        }
                        let present: Vec<f64> = aligned.iter().flatten().copied().collect();
                        let mean = present.iter().sum::<f64>() / present.len() as f64;
                        aligned.into_iter().map(|x| x.unwrap_or(mean)).collect()
                    }
                }
            };
            if kind == ViewKind::Genotype {
                if let Some((i, bad)) = values.iter().enumerate().find(|(_, x)| ![0.0, 1.0, 2.0].contains(*x)) {
                    return Err(parse_err(
                        path,
                        format!("feature `{f}`, sample `{}`: genotype {bad} is not in {{0, 1, 2}}", sample_ids[i]),
                    ));
                }
            }
            kept_ids.push(f.clone());
            kept_cols.push(values);
        }
        if kept_ids.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no usable features", path.display())));
        }
        let values = DMatrix::from_fn(n, kept_cols.len(), |i, j| kept_cols[j][i]);
        let kept_map: BTreeMap<String, String> = kept_ids.iter().map(|f| (f.clone(), map[f].clone())).collect();
        views.push(DataView::new(values, kind, kept_ids)?);
        gene_maps.push(kept_map);
    }

    let phenotype = DVector::from_iterator(n, sample_ids.iter().map(|s| pheno[s][0]));
    let (covariate_names, covariates) = match covar {
        Some((names, rows)) => {
            let m = DMatrix::from_fn(n, names.len(), |i, j| rows[&sample_ids[i]][j]);
            (names, m)
        }
        None => (Vec::new(), DMatrix::zeros(n, 0)),
    };
    let views: [DataView; 3] = views.try_into().expect("three views");
    let gene_maps: [BTreeMap<String, String>; 3] = gene_maps.try_into().expect("three gene maps");
    Ok(OmicsBundle {
        sample_ids,
        views,
        gene_maps,
        phenotype_name: pheno_header[0].clone(),
        phenotype,
        covariate_names,
        covariates,
    })
}

/// The canonical file set of a bundle as `(file name, contents)`.
fn bundle_files(bundle: &OmicsBundle) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for (v, view) in bundle.views.iter().enumerate() {
        let mut s = String::from("feature_id");
        for id in &bundle.sample_ids {
            s.push('\t');
            s.push_str(id);
        }
        s.push('\n');
        for (j, f) in view.feature_ids().iter().enumerate() {
            s.push_str(f);
            for i in 0..bundle.samples() {
                s.push('\t');
                s.push_str(&view.values()[(i, j)].to_string());
            }
            s.push('\n');
        }
        files.push((format!("view{}.tsv", v + 1), s));

        let mut m = String::from("feature_id\tgene\n");
        for f in view.feature_ids() {
            m.push_str(&format!("{f}\t{}\n", bundle.gene_maps[v][f]));
        }
        files.push((format!("genemap{}.tsv", v + 1), m));
    }
    let mut p = format!("sample_id\t{}\n", bundle.phenotype_name);
    for (id, y) in bundle.sample_ids.iter().zip(bundle.phenotype.iter()) {
        p.push_str(&format!("{id}\t{y}\n"));
    }
    files.push(("pheno.tsv".into(), p));
    let mut c = String::from("sample_id");
    for name in &bundle.covariate_names {
        c.push('\t');
        c.push_str(name);
    }
    c.push('\n');
    for (i, id) in bundle.sample_ids.iter().enumerate() {
        c.push_str(id);
        for j in 0..bundle.covariates.ncols() {
            c.push('\t');
            c.push_str(&bundle.covariates[(i, j)].to_string());
        }
        c.push('\n');
    }
    files.push(("covar.tsv".into(), c));
    files
}

/// Writes the bundle in the format [`load_bundle`] reads.
pub fn save_bundle(bundle: &OmicsBundle, dir: &Path) -> Result<BundlePaths> {
    fs::create_dir_all(dir)?;
    for (name, contents) in bundle_files(bundle) {
        fs::write(dir.join(name), contents)?;
    }
    Ok(BundlePaths {
        views: [1, 2, 3].map(|v| dir.join(format!("view{v}.tsv"))),
        gene_maps: [1, 2, 3].map(|v| dir.join(format!("genemap{v}.tsv"))),
        pheno: dir.join("pheno.tsv"),
        covar: Some(dir.join("covar.tsv")),
    })
}

/// SHA-256 of the bundle's canonical file set.
pub fn bundle_hash(bundle: &OmicsBundle) -> String {
    let mut h = Sha256::new();
    for (name, contents) in bundle_files(bundle) {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(contents.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// A small random bundle: `genes[v]` genes per view with
/// `features_per_gene` features each, genotypes in view 1, one covariate
/// (`age`) and an outcome carrying a three-way interaction of the first
/// gene of every view.
pub fn toy_bundle(n: usize, genes: [usize; 3], features_per_gene: usize, seed: u64) -> Result<OmicsBundle> {
    if n < 3 || features_per_gene == 0 || genes.contains(&0) {
        return Err(Error::InvalidArgument("toy bundle needs n >= 3 and nonzero gene and feature counts".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(3);
    let sample_ids: Vec<String> = (1..=n).map(|i| format!("s{i:0width$}")).collect();
    let mut views = Vec::new();
    let mut gene_maps = Vec::new();
    for (v, &g) in genes.iter().enumerate() {
        let p = g * features_per_gene;
        let kind = if v == 0 { ViewKind::Genotype } else { ViewKind::Continuous };
        let mut values = DMatrix::zeros(n, p);
        for j in 0..p {
            if kind == ViewKind::Genotype {
                let maf = rng.random_range(0.1..0.4);
                let b = Binomial::new(2, maf).expect("valid binomial");
                for i in 0..n {
                    values[(i, j)] = b.sample(&mut rng) as f64;
                }
            } else {
                for i in 0..n {
                    values[(i, j)] = StandardNormal.sample(&mut rng);
                }
            }
        }
        let mut ids = Vec::new();
        let mut map = BTreeMap::new();
        for gi in 0..g {
            for f in 0..features_per_gene {
                let id = format!("v{}g{:02}_f{}", v + 1, gi + 1, f + 1);
                map.insert(id.clone(), format!("v{}g{:02}", v + 1, gi + 1));
                ids.push(id);
            }
        }
        views.push(DataView::new(values, kind, ids)?);
        gene_maps.push(map);
    }
    let age = DMatrix::from_fn(n, 1, |_, _| rng.random_range(40.0..90.0));
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let signal = (views[0].values()[(i, 0)] - 0.5) * views[1].values()[(i, 0)] * views[2].values()[(i, 0)];
        0.02 * age[(i, 0)] + 0.8 * signal + e
    });
    Ok(OmicsBundle {
        sample_ids,
        views: views.try_into().expect("three views"),
        gene_maps: gene_maps.try_into().expect("three gene maps"),
        phenotype_name: "y".into(),
        phenotype: y,
        covariate_names: vec!["age".into()],
        covariates: age,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSettings {
    pub na_policy: NaPolicy,
    pub view_kinds: [ViewKind; 3],
    /// Triplets per checkpoint.
    pub checkpoint_every: usize,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            na_policy: NaPolicy::Fail,
            view_kinds: [ViewKind::Genotype, ViewKind::Continuous, ViewKind::Continuous],
            checkpoint_every: 1000,
        }
    }
}

/// The scan's run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub kirwls: KirwlsOptions,
    pub kernels: KernelConfig,
    pub reml: RemlOptions,
    pub test: CompositeOptions,
    pub scan: ScanSettings,
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            loss: self.loss,
            kirwls: self.kirwls,
            kernels: self.kernels,
            reml: self.reml.clone(),
            test: self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletStatus {
    Ok,
    CenteringFailed,
    OverallFailed,
    NullFitFailed,
    CompositeFailed,
    FullFitFailed,
}

impl TripletStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TripletStatus::Ok => "ok",
            TripletStatus::CenteringFailed => "centering_failed",
            TripletStatus::OverallFailed => "overall_failed",
            TripletStatus::NullFitFailed => "null_fit_failed",
            TripletStatus::CompositeFailed => "composite_failed",
            TripletStatus::FullFitFailed => "full_fit_failed",
        }
    }
}

impl std::str::FromStr for TripletStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TripletStatus::Ok,
            TripletStatus::CenteringFailed,
            TripletStatus::OverallFailed,
            TripletStatus::NullFitFailed,
            TripletStatus::CompositeFailed,
            TripletStatus::FullFitFailed,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown triplet status `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KirwlsSummary {
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub index: usize,
    pub genes: [String; 3],
    pub status: TripletStatus,
    pub sigma2: Option<f64>,
    /// Full-model variance components in component order.
    pub tau: Option<Vec<f64>>,
    pub overall_p: Option<f64>,
    pub composite_p: Option<f64>,
    /// Full-model fit diagnostics.
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub kirwls: [Option<KirwlsSummary>; 3],
}

pub const SCAN_COLUMNS: [&str; 23] = [
    "index",
    "gene1",
    "gene2",
    "gene3",
    "status",
    "sigma2",
    "tau_1",
    "tau_2",
    "tau_3",
    "tau_1x2",
    "tau_1x3",
    "tau_2x3",
    "tau_1x2x3",
    "overall_p",
    "composite_p",
    "converged",
    "iterations",
    "kirwls1_iterations",
    "kirwls1_converged",
    "kirwls2_iterations",
    "kirwls2_converged",
    "kirwls3_iterations",
    "kirwls3_converged",
];

fn fmt_opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_else(|| NA.to_string())
}

/// p-values are written with six significant digits.
pub fn format_p(p: f64) -> String {
    format!("{p:.5e}")
}

fn parse_opt<T: std::str::FromStr>(t: &str) -> Result<Option<T>> {
    if t == NA {
        return Ok(None);
    }
    t.parse().map(Some).map_err(|_| Error::InvalidArgument(format!("cannot parse scan field `{t}`")))
}

impl ScanRecord {
    pub fn to_tsv_line(&self) -> String {
        let mut f: Vec<String> = vec![self.index.to_string()];
        f.extend(self.genes.iter().cloned());
        f.push(self.status.as_str().to_string());
        f.push(fmt_opt(self.sigma2, |v| format!("{v:.6e}")));
        match &self.tau {
            Some(t) => f.extend(t.iter().map(|v| format!("{v:.6e}"))),
            None => f.extend(std::iter::repeat_n(NA.to_string(), 7)),
        }
        f.push(fmt_opt(self.overall_p, format_p));
        f.push(fmt_opt(self.composite_p, format_p));
        f.push(fmt_opt(self.converged, |b| b.to_string()));
        f.push(fmt_opt(self.iterations, |i| i.to_string()));
        for k in &self.kirwls {
            f.push(fmt_opt(k.map(|k| k.iterations), |i| i.to_string()));
            f.push(fmt_opt(k.map(|k| k.converged), |b| b.to_string()));
        }
        f.join("\t")
    }

    pub fn from_tsv_line(line: &str) -> Result<ScanRecord> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != SCAN_COLUMNS.len() {
            return Err(Error::InvalidArgument(format!("scan row has {} fields, expected {}", f.len(), SCAN_COLUMNS.len())));
        }
        let tau: Vec<Option<f64>> = f[6..13].iter().map(|t| parse_opt(t)).collect::<Result<_>>()?;
        let tau = if tau.iter().all(Option::is_some) { Some(tau.into_iter().flatten().collect()) } else { None };
        let mut kirwls = [None; 3];
        for (v, slot) in kirwls.iter_mut().enumerate() {
            let it: Option<usize> = parse_opt(f[17 + 2 * v])?;
            let conv: Option<bool> = parse_opt(f[18 + 2 * v])?;
            if let (Some(iterations), Some(converged)) = (it, conv) {
                *slot = Some(KirwlsSummary { iterations, converged });
            }
        }
        Ok(ScanRecord {
            index: f[0].parse().map_err(|_| Error::InvalidArgument(format!("bad scan index `{}`", f[0])))?,
            genes: [f[1].to_string(), f[2].to_string(), f[3].to_string()],
            status: f[4].parse()?,
            sigma2: parse_opt(f[5])?,
            tau,
            overall_p: parse_opt(f[13])?,
            composite_p: parse_opt(f[14])?,
            converged: parse_opt(f[15])?,
            iterations: parse_opt(f[16])?,
            kirwls,
        })
    }
}

/// Per-gene robust-centered kernels for every view, computed once and
/// shared by all triplets.
pub struct ScanPlan {
    pub genes: [Vec<String>; 3],
    centerings: [Vec<std::result::Result<RobustCentering, String>>; 3],
    y: DVector<f64>,
    x: DMatrix<f64>,
    pipeline: PipelineConfig,
}

impl ScanPlan {
    pub fn new(bundle: &OmicsBundle, cfg: &RunConfig) -> Result<ScanPlan> {
        let pipeline = cfg.pipeline();
        let loss = pipeline.loss.build()?;
        let mut genes: Vec<Vec<String>> = Vec::new();
        let mut centerings = Vec::new();
        for v in 0..3 {
            let blocks = bundle.genes(v);
            let results: Vec<std::result::Result<RobustCentering, String>> = blocks
                .par_iter()
                .map(|b| {
                    bundle
                        .gene_view(v, b)
                        .and_then(|view| center_view(&view, &loss, &pipeline))
                        .map_err(|e| {
                            log::warn!("view {} gene {}: centering failed: {e}", v + 1, b.gene);
                            e.to_string()
                        })
                })
                .collect();
            genes.push(blocks.into_iter().map(|b| b.gene).collect());
            centerings.push(results);
        }
        Ok(ScanPlan {
            genes: genes.try_into().expect("three views"),
            centerings: centerings.try_into().expect("three views"),
            y: bundle.phenotype.clone(),
            x: bundle.design(),
            pipeline,
        })
    }

    pub fn len(&self) -> usize {
        self.genes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gene_indices(&self, index: usize) -> [usize; 3] {
        let n3 = self.genes[2].len();
        let n2 = self.genes[1].len();
        [index / (n2 * n3), (index / n3) % n2, index % n3]
    }

    /// Analyses triplet `index` of the lexicographic enumeration.
    pub fn run_triplet(&self, index: usize) -> ScanRecord {
        let gi = self.gene_indices(index);
        let genes = [0, 1, 2].map(|v| self.genes[v][gi[v]].clone());
        let cents = [0, 1, 2].map(|v| &self.centerings[v][gi[v]]);
        let kirwls = cents.map(|c| c.as_ref().ok().map(|c| KirwlsSummary { iterations: c.iterations, converged: c.converged }));
        let mut rec = ScanRecord {
            index,
            genes,
            status: TripletStatus::Ok,
            sigma2: None,
            tau: None,
            overall_p: None,
            composite_p: None,
            converged: None,
            iterations: None,
            kirwls,
        };
        let (Ok(c1), Ok(c2), Ok(c3)) = (cents[0], cents[1], cents[2]) else {
            rec.status = TripletStatus::CenteringFailed;
            return rec;
        };
        let comps = match assemble_components(&c1.centered, &c2.centered, &c3.centered) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("triplet {index}: {e}");
                rec.status = TripletStatus::CenteringFailed;
                return rec;
            }
        };
        let fail = |rec: &mut ScanRecord, status: TripletStatus, e: Error| {
            log::warn!("triplet {index} ({}): {}: {e}", rec.genes.join(","), status.as_str());
            if rec.status == TripletStatus::Ok {
                rec.status = status;
            }
        };
        match overall_score_test(&self.y, &self.x, &comps) {
            Ok(t) => rec.overall_p = Some(t.p_value),
            Err(e) => fail(&mut rec, TripletStatus::OverallFailed, e),
        }
        let null = comps.without(comps.len() - 1).and_then(|c| reml_fit(&self.y, &self.x, &c, &[], &self.pipeline.reml));
        match null {
            Ok(null_fit) => match composite_score_test(&self.y, &self.x, &comps, &null_fit, &self.pipeline.test) {
                Ok(t) => rec.composite_p = Some(t.p_value),
                Err(e) => fail(&mut rec, TripletStatus::CompositeFailed, e),
            },
            Err(e) => fail(&mut rec, TripletStatus::NullFitFailed, e),
        }
        match reml_fit(&self.y, &self.x, &comps, &[], &self.pipeline.reml) {
            Ok(full) => {
                rec.sigma2 = Some(full.sigma2);
                rec.tau = Some(full.tau.clone());
                rec.converged = Some(full.converged);
                rec.iterations = Some(full.n_iter);
            }
            Err(e) => fail(&mut rec, TripletStatus::FullFitFailed, e),
        }
        rec
    }

    /// Runs triplets `start..` in chunks of `chunk`, handing each chunk to
    /// `sink` in index order.
    pub fn run_from(
        &self,
        start: usize,
        chunk: usize,
        mut sink: impl FnMut(&[ScanRecord]) -> Result<()>,
    ) -> Result<()> {
        let chunk = chunk.max(1);
        let mut i = start;
        while i < self.len() {
            let end = (i + chunk).min(self.len());
            let records: Vec<ScanRecord> = (i..end).into_par_iter().map(|k| self.run_triplet(k)).collect();
            sink(&records)?;
            i = end;
        }
        Ok(())
    }
}

/// Every triplet record, in lexicographic gene order.
pub fn triplet_scan(bundle: &OmicsBundle, cfg: &RunConfig) -> Result<Vec<ScanRecord>> {
    let plan = ScanPlan::new(bundle, cfg)?;
    let mut out = Vec::with_capacity(plan.len());
    plan.run_from(0, cfg.scan.checkpoint_every, |r| {
        out.extend_from_slice(r);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub config_hash: String,
    pub bundle_hash: String,
    pub samples: usize,
    pub genes: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCount {
    pub threshold: f64,
    pub overall: usize,
    pub composite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub bundle_hash: String,
    pub samples: usize,
    pub genes: [usize; 3],
    pub records: usize,
    pub failures: usize,
    pub threshold_counts: Vec<ThresholdCount>,
    pub files: Vec<String>,
}

/// The p-value as written to `scan.tsv`.
pub fn printed_p(p: f64) -> f64 {
    format_p(p).parse().expect("formatted float parses")
}

/// `-log10(p)` of the printed p-value, with p floored at `1e-300`.
pub fn neg_log10(p: f64) -> f64 {
    let v = -printed_p(p).max(1e-300).log10();
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Writes `scan.tsv`, `manhattan.tsv` and `manifest.json`.
pub fn write_outputs(records: &[ScanRecord], out_dir: &Path, meta: &ScanMeta) -> Result<ScanManifest> {
    fs::create_dir_all(out_dir)?;
    let mut scan = BufWriter::new(fs::File::create(out_dir.join("scan.tsv"))?);
    writeln!(scan, "{}", SCAN_COLUMNS.join("\t"))?;
    for r in records {
        writeln!(scan, "{}", r.to_tsv_line())?;
    }
    scan.flush()?;

    let mut man = BufWriter::new(fs::File::create(out_dir.join("manhattan.tsv"))?);
    writeln!(man, "index\tneg_log10_overall_p\tneg_log10_composite_p")?;
    for r in records {
        let f = |p: Option<f64>| fmt_opt(p, |p| format!("{:.6}", neg_log10(p)));
        writeln!(man, "{}\t{}\t{}", r.index, f(r.overall_p), f(r.composite_p))?;
    }
    man.flush()?;

    let count = |get: fn(&ScanRecord) -> Option<f64>, t: f64| {
        records.iter().filter_map(get).filter(|p| printed_p(*p) <= t).count()
    };
    let threshold_counts = THRESHOLDS
        .iter()
        .map(|&t| ThresholdCount { threshold: t, overall: count(|r| r.overall_p, t), composite: count(|r| r.composite_p, t) })
        .collect();
    let manifest = ScanManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: meta.config_hash.clone(),
        bundle_hash: meta.bundle_hash.clone(),
        samples: meta.samples,
        genes: meta.genes,
        records: records.len(),
        failures: records.iter().filter(|r| r.status != TripletStatus::Ok).count(),
        threshold_counts,
        files: vec!["scan.tsv".into(), "manhattan.tsv".into(), "manifest.json".into()],
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub const PARTIAL_FILE: &str = "scan.partial.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    run_hash: String,
    completed: usize,
}

fn write_checkpoint(out_dir: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = out_dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string(ck)?)?;
    fs::rename(tmp, out_dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn read_partial(path: &Path, completed: usize) -> Result<Vec<ScanRecord>> {
    let file = fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == SCAN_COLUMNS.join("\t") => {}
        _ => return Err(parse_err(path, "checkpoint file has an unexpected header")),
    }
    let mut out = Vec::with_capacity(completed);
    for line in lines.take(completed) {
        let rec = ScanRecord::from_tsv_line(&line?).map_err(|e| parse_err(path, e.to_string()))?;
        if rec.index != out.len() {
            return Err(parse_err(path, format!("checkpoint row {} has index {}", out.len(), rec.index)));
        }
        out.push(rec);
    }
    if out.len() < completed {
        return Err(parse_err(path, format!("checkpoint lists {completed} records but holds {}", out.len())));
    }
    Ok(out)
}

/// A full scan into `out_dir` with checkpoints every
/// `cfg.scan.checkpoint_every` triplets. With `resume`, completed triplets
/// of an interrupted run with the same bundle and config are reused.
pub fn run_scan(bundle: &OmicsBundle, cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<ScanManifest> {
    fs::create_dir_all(out_dir)?;
    let meta = ScanMeta {
        config_hash: config_hash(cfg)?,
        bundle_hash: bundle_hash(bundle),
        samples: bundle.samples(),
        genes: [0, 1, 2].map(|v| bundle.genes(v).len()),
    };
    let run_hash = hex::encode(Sha256::digest(format!("{}{}", meta.config_hash, meta.bundle_hash)));
    let partial_path = out_dir.join(PARTIAL_FILE);
    let ck_path = out_dir.join(CHECKPOINT_FILE);

    let mut records = Vec::new();
    if resume && ck_path.exists() {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(&ck_path)?)?;
        if ck.run_hash != run_hash {
            return Err(Error::InvalidArgument(format!(
                "{} belongs to a different bundle or config; remove it or drop --resume",
                ck_path.display()
            )));
        }
        records = read_partial(&partial_path, ck.completed)?;
        log::info!("resuming after {} completed triplets", records.len());
    }
    // rewrite the partial file so it holds exactly the reused records
    let mut partial = BufWriter::new(fs::File::create(&partial_path)?);
    writeln!(partial, "{}", SCAN_COLUMNS.join("\t"))?;
    for r in &records {
        writeln!(partial, "{}", r.to_tsv_line())?;
    }
    partial.flush()?;
    write_checkpoint(out_dir, &Checkpoint { run_hash: run_hash.clone(), completed: records.len() })?;

    let plan = ScanPlan::new(bundle, cfg)?;
    plan.run_from(records.len(), cfg.scan.checkpoint_every, |chunk| {
        for r in chunk {
            writeln!(partial, "{}", r.to_tsv_line())?;
        }
        partial.flush()?;
        partial.get_ref().sync_data()?;
        records.extend_from_slice(chunk);
        write_checkpoint(out_dir, &Checkpoint { run_hash: run_hash.clone(), completed: records.len() })?;
        log::info!("{} of {} triplets done", records.len(), plan.len());
        Ok(())
    })?;
    drop(partial);

    let manifest = write_outputs(&records, out_dir, &meta)?;
    fs::remove_file(&partial_path)?;
    fs::remove_file(&ck_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lines_round_trip() {
        let rec = ScanRecord {
            index: 7,
            genes: ["a".into(), "b".into(), "c".into()],
            status: TripletStatus::CompositeFailed,
            sigma2: Some(0.5),
            tau: Some(vec![0.0, 1.25e-3, 2.0, 0.0, 0.0, 3.5, 0.0]),
            overall_p: Some(1.234_567_89e-7),
            composite_p: None,
            converged: Some(true),
            iterations: Some(12),
            kirwls: [Some(KirwlsSummary { iterations: 4, converged: true }), None, Some(KirwlsSummary { iterations: 9, converged: false })],
        };
        let line = rec.to_tsv_line();
        let back = ScanRecord::from_tsv_line(&line).unwrap();
        assert_eq!(back.to_tsv_line(), line);
        assert_eq!(back.composite_p, None);
        assert_eq!(back.overall_p, Some(1.23457e-7));
        assert_eq!(back.kirwls[1], None);
    }

    #[test]
    fn manhattan_value_of_round_p() {
        assert_eq!(format!("{:.6}", neg_log10(1e-6)), "6.000000");
        assert_eq!(format!("{:.6}", neg_log10(1.0)), "0.000000");
        assert_eq!(neg_log10(0.0), 300.0);
    }

    #[test]
    fn triplet_enumeration_is_lexicographic() {
        let bundle = toy_bundle(12, [2, 2, 2], 2, 3).unwrap();
        let plan = ScanPlan::new(&bundle, &RunConfig::default()).unwrap();
        assert_eq!(plan.len(), 8);
        let triples: Vec<[usize; 3]> = (0..8).map(|i| plan.gene_indices(i)).collect();
        let mut sorted = triples.clone();
        sorted.sort();
        assert_eq!(triples, sorted);
        assert_eq!(triples[5], [1, 0, 1]);
    }

    #[test]
    fn status_codes_parse_back() {
        for s in ["ok", "centering_failed", "overall_failed", "null_fit_failed", "composite_failed", "full_fit_failed"] {
            assert_eq!(s.parse::<TripletStatus>().unwrap().as_str(), s);
        }
        assert!("bogus".parse::<TripletStatus>().is_err());
    }
}
