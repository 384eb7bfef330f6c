//! `scarline`: command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scarline::features::{extract_features, mrmr_select, LabeledDataset};
use scarline::fusion::{
    compare_strategies, dice_table_csv, fuse, FusionConfig, Strategy, WarpedAtlas,
};
use scarline::metrics::{bland_altman, evaluate};
use scarline::pipeline::{
    assemble_ground_truth, clicks_to_csv, group_clicks, label_training_set, observer_variance,
    parse_clicks, prepare_cohort, run_cohort, synthetic_cohort, AnatomySource, ClickRecord,
    CohortReport, PatientInput, PipelineConfig,
};
use scarline::registration::{register_hierarchical, warp_atlas, RegistrationConfig, Stages};
use scarline::superpixel::{
    adherence_sweep, maps_from_label_volume, mask_slice, slic_volume, superpixel_label_volume,
    SlicParams, Slice,
};
use scarline::svm::{grid_search, train, validate, GridSearchSpec, Protocol, SvmModel, SvmParams};
use scarline::volume::{
    make_phantom, read_volume, write_volume, LabelVolume, Mask, PhantomSpec, ScalarVolume, Volume,
};

#[derive(Parser)]
#[command(
    name = "scarline",
    version,
    about = "Left-atrial scar segmentation from LGE MRI"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect, convert or synthesise volumes.
    #[command(subcommand)]
    Vol(VolCmd),
    /// Register an atlas to a target image.
    Register(RegisterArgs),
    /// Fuse atlas labels in target space.
    Fuse(FuseArgs),
    /// SLIC superpixels, slice by slice.
    Slic(SlicArgs),
    /// Superpixel adherence to a truth mask over a compactness sweep.
    SlicAdherence(AdherenceArgs),
    /// Superpixel feature table.
    Features(FeaturesArgs),
    /// mRMR feature selection.
    Mrmr(MrmrArgs),
    /// Train, apply and validate the SVM.
    #[command(subcommand)]
    Svm(SvmCmd),
    /// Compare an automatic mask with a manual one.
    Eval(EvalArgs),
    /// Ground truth from clicks, and observer agreement.
    Gt(GtArgs),
    /// Full pipeline over a cohort.
    Pipeline(PipelineArgs),
    /// Bland-Altman and summary tables from a patients CSV.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum VolCmd {
    /// Print geometry, type and value range.
    Info { path: PathBuf },
    /// Re-write a volume, optionally changing its voxel type.
    Convert {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        to: Option<VoxelType>,
    },
    /// Render a phantom from a JSON spec: intensities to `--out`, labels
    /// to `<out>_labels.hdr`.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VoxelType {
    F32,
    U16,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    atlas_labels: PathBuf,
    #[arg(long, default_value = "global,local,ffd")]
    stages: String,
    /// Transform chain output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the warped atlas labels here.
    #[arg(long)]
    warped_labels: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    target: PathBuf,
    /// `image.hdr:labels.hdr`, repeated.
    #[arg(long = "atlas", required = true)]
    atlases: Vec<String>,
    #[arg(long, default_value = "msp")]
    strategy: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    scales: Vec<f64>,
    /// Register each atlas first with these stages; atlases are taken to be
    /// in target space otherwise.
    #[arg(long)]
    register: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// With a truth label volume, write per-strategy Dice to `--report`.
    #[arg(long, requires = "report")]
    truth: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SlicArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long = "S", default_value_t = 4)]
    s: usize,
    #[arg(long, default_value_t = 4.0)]
    m: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdherenceArgs {
    /// Intensity volume to segment.
    #[arg(long)]
    volume: PathBuf,
    /// Truth mask (non-zero labels, or `--label`).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    label: Option<u16>,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    m_sweep: Vec<f64>,
    #[arg(long = "S", default_value_t = 4)]
    s: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Blood-pool normalised intensities.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    superpixels: PathBuf,
    #[arg(long)]
    wall: PathBuf,
    /// Ground-truth scar mask; without it every row is non-enhanced.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "patient")]
    patient: String,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MrmrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    features: PathBuf,
    /// Columns to use; all by default.
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<String>>,
}

#[derive(Args)]
struct ParamArgs {
    /// Box constraint; accepts `2^e`.
    #[arg(long, default_value = "2^8.5")]
    rho: String,
    #[arg(long, default_value = "2^2.5")]
    gamma: String,
}

#[derive(Subcommand)]
enum SvmCmd {
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decision values for every row: `patient,slice,sp_id,decision,enhanced`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated (ρ, γ) search; writes the surface CSV and the best
    /// cell as JSON next to it.
    Gridsearch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "paper")]
        preset: GridPreset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Validate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        params: ParamArgs,
        /// `loo`, `kfold:<k>` or `split:<a,b>|<c,d>`.
        #[arg(long, default_value = "loo")]
        protocol: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridPreset {
    Coarse,
    Paper,
    Centered,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    auto: PathBuf,
    #[arg(long)]
    manual: PathBuf,
    /// Compare this label only; any non-zero label otherwise.
    #[arg(long)]
    label: Option<u16>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "dice,jaccard,precision,npv,hausdorff,asd"
    )]
    metrics: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    clicks: PathBuf,
    #[arg(long)]
    patient: String,
    #[arg(long)]
    superpixels: PathBuf,
    #[arg(long)]
    wall: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    /// One `<annotator>_<session>.hdr` per click set, plus
    /// `observer.csv` when there are two or more.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV `patient,lge,anatomy,target,reference`; paths relative to the
    /// manifest. An empty anatomy means multi-atlas segmentation.
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    clicks: Option<PathBuf>,
    /// Click set to use when a patient has several.
    #[arg(long)]
    annotator: Option<String>,
    #[arg(long)]
    session: Option<String>,
    /// `image.hdr:labels.hdr`, repeated.
    #[arg(long = "atlas")]
    atlases: Vec<String>,
    /// Run on this many synthetic patients instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Synthetic noise as a fraction of the scar contrast.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Synthetic atlases; 0 gives the true anatomy.
    #[arg(long, default_value_t = 5)]
    synthetic_atlases: usize,
    #[arg(long)]
    out: PathBuf,
    /// Skip the per-patient intermediate volumes.
    #[arg(long)]
    no_artifacts: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// `patients.csv` from a pipeline run.
    #[arg(long)]
    patients: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Vol(c) => vol(c),
        Cmd::Register(a) => register(a),
        Cmd::Fuse(a) => fuse_cmd(a),
        Cmd::Slic(a) => slic(a),
        Cmd::SlicAdherence(a) => adherence(a),
        Cmd::Features(a) => features(a),
        Cmd::Mrmr(a) => mrmr(a),
        Cmd::Svm(c) => svm(c),
        Cmd::Eval(a) => eval(a),
        Cmd::Gt(a) => gt(a),
        Cmd::Pipeline(a) => pipeline(a),
        Cmd::Report(a) => report(a),
    }
}

fn read(path: &Path) -> Result<Volume> {
    read_volume(path).with_context(|| format!("reading {}", path.display()))
}

fn scalar(path: &Path) -> Result<ScalarVolume> {
    Ok(read(path)?.into_scalar()?)
}

fn label_volume(path: &Path) -> Result<LabelVolume> {
    Ok(read(path)?.into_labels()?)
}

fn mask(path: &Path, label: Option<u16>) -> Result<Mask> {
    let v = label_volume(path)?;
    Ok(match label {
        Some(l) => v.mask_of(&[l]),
        None => Mask::from_fn(v.geometry().clone(), |[x, y, z]| v.get(x, y, z) != 0),
    })
}

fn save(v: impl Into<Volume>, path: &Path) -> Result<()> {
    write_volume(&v.into(), path).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// A number or `2^e`.
fn number(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.strip_prefix("2^") {
        Some(e) => 2f64.powf(e.trim().parse()?),
        None => s.parse()?,
    };
    Ok(v)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn atlas_pairs(specs: &[String]) -> Result<Vec<(String, ScalarVolume, LabelVolume)>> {
    specs
        .iter()
        .map(|s| {
            let (img, lab) = s
                .split_once(':')
                .ok_or_else(|| anyhow!("atlas {s:?} must be image.hdr:labels.hdr"))?;
            Ok((
                s.clone(),
                scalar(Path::new(img))?,
                label_volume(Path::new(lab))?,
            ))
        })
        .collect()
}

fn vol(c: VolCmd) -> Result<()> {
    match c {
        VolCmd::Info { path } => {
            let v = read(&path)?;
            let g = v.geometry();
            println!("dims: {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
            println!(
                "spacing: {} {} {}",
                g.spacing[0], g.spacing[1], g.spacing[2]
            );
            println!("origin: {} {} {}", g.origin[0], g.origin[1], g.origin[2]);
            match &v {
                Volume::Scalar(s) => {
                    let (lo, hi) = s.range();
                    println!("dtype: f32\nrange: {lo} {hi}");
                }
                Volume::Labels(l) => {
                    println!("dtype: u16");
                    for id in l.present_labels() {
                        let n = l.data().iter().filter(|&&x| x == id).count();
                        let name = l.label_table().get(&id).map(String::as_str).unwrap_or("?");
                        println!("label {id} ({name}): {n} voxels");
                    }
                }
            }
            Ok(())
        }
        VolCmd::Convert { input, out, to } => {
            let v = read(&input)?;
            let v = match (v, to) {
                (Volume::Labels(l), Some(VoxelType::F32)) => Volume::Scalar(ScalarVolume::new(
                    l.geometry().clone(),
                    l.data().iter().map(|&x| x as f64).collect(),
                )?),
                (Volume::Scalar(s), Some(VoxelType::U16)) => {
                    let data = s
                        .data()
                        .iter()
                        .map(|&x| {
                            let r = x.round();
                            if (0.0..=u16::MAX as f64).contains(&r) {
                                Ok(r as u16)
                            } else {
                                Err(anyhow!("value {x} does not fit u16"))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Volume::Labels(LabelVolume::with_standard_table(
                        s.geometry().clone(),
                        data,
                    )?)
                }
                (v, _) => v,
            };
            save(v, &out)
        }
        VolCmd::Phantom { spec, seed, out } => {
            let mut s = PhantomSpec::from_json(&read_text(&spec)?)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let (img, lab) = make_phantom(&s)?;
            save(img, &out)?;
            save(lab, &sibling(&out, "_labels.hdr"))
        }
    }
}

fn register(a: RegisterArgs) -> Result<()> {
    let target = scalar(&a.target)?;
    let atlas = scalar(&a.atlas)?;
    let labels = label_volume(&a.atlas_labels)?;
    let cfg = RegistrationConfig {
        stages: Stages::parse(&a.stages)?,
        ..Default::default()
    };
    let r = register_hierarchical(&target, (&atlas, &labels), &cfg)?;
    for s in &r.log {
        eprintln!(
            "{}: {:.5} -> {:.5}",
            s.stage, s.initial_score, s.final_score
        );
    }
    write_text(&a.out, &r.chain.to_text())?;
    if let Some(p) = a.warped_labels {
        let (_, wl) = warp_atlas((&atlas, &labels), &r.chain, target.geometry())?;
        save(wl, &p)?;
    }
    Ok(())
}

fn fuse_cmd(a: FuseArgs) -> Result<()> {
    let target = scalar(&a.target)?;
    let cfg = FusionConfig {
        strategy: a.strategy.parse()?,
        scales: a.scales.clone(),
        ..Default::default()
    };
    let reg = match &a.register {
        Some(s) => Some(RegistrationConfig {
            stages: Stages::parse(s)?,
            ..Default::default()
        }),
        None => None,
    };
    let mut warped = Vec::new();
    for (id, img, lab) in atlas_pairs(&a.atlases)? {
        let (intensity, labels) = match &reg {
            Some(rc) => {
                let r = register_hierarchical(&target, (&img, &lab), rc)
                    .with_context(|| format!("registering {id}"))?;
                warp_atlas((&img, &lab), &r.chain, target.geometry())?
            }
            None => (img, lab),
        };
        warped.push(WarpedAtlas {
            intensity,
            labels,
            id,
        });
    }
    save(fuse(&target, &warped, &cfg)?, &a.out)?;
    if let (Some(truth), Some(report)) = (a.truth, a.report) {
        let rows = compare_strategies(
            &target,
            &label_volume(&truth)?,
            &warped,
            &Strategy::ALL,
            &cfg,
        )?;
        write_text(&report, &dice_table_csv(&rows))?;
    }
    Ok(())
}

fn slic(a: SlicArgs) -> Result<()> {
    let v = scalar(&a.volume)?;
    let p = SlicParams {
        s: a.s,
        m: a.m,
        iterations: a.iters,
        ..Default::default()
    };
    let maps = slic_volume(&v, &p)?;
    save(superpixel_label_volume(v.geometry(), &maps)?, &a.out)
}

fn adherence(a: AdherenceArgs) -> Result<()> {
    let v = scalar(&a.volume)?;
    let truth = mask(&a.truth, a.label)?;
    if v.geometry() != truth.geometry() {
        bail!("volume and truth geometries differ");
    }
    let base = SlicParams {
        s: a.s,
        ..Default::default()
    };
    let mut csv = String::from("slice,m,dice\n");
    let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for z in 0..v.geometry().dims[2] {
        let t = mask_slice(&truth, z);
        if !t.contains(&true) {
            continue;
        }
        let slice = Slice::of_volume(&v, z);
        for (i, (m, d)) in adherence_sweep(&slice, &t, &base, &a.m_sweep, a.ratio)?
            .into_iter()
            .enumerate()
        {
            csv.push_str(&format!("{z},{m},{d}\n"));
            by_m.entry(i).or_default().push(d);
        }
    }
    if by_m.is_empty() {
        bail!("truth mask is empty");
    }
    let means: Vec<f64> = by_m
        .values()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    for (m, d) in a.m_sweep.iter().zip(&means) {
        eprintln!("m = {m}: mean Dice {d:.4}");
    }
    let spread = means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min);
    eprintln!("spread (max - min): {spread:.4}");
    write_text(&a.out, &csv)
}

fn features(a: FeaturesArgs) -> Result<()> {
    let v = scalar(&a.volume)?;
    let sp = label_volume(&a.superpixels)?;
    let wall = mask(&a.wall, None)?;
    let maps = maps_from_label_volume(&sp, Some(&v))?;
    let rows = extract_features(&v, &maps, &wall, a.ratio)?;
    let enhanced: BTreeMap<(usize, u32), bool> = match &a.gt {
        Some(p) => label_training_set(&maps, &wall, &mask(p, None)?, a.ratio)?
            .into_iter()
            .map(|(z, id, e)| ((z, id), e))
            .collect(),
        None => BTreeMap::new(),
    };
    let mut ds = LabeledDataset::with_standard_names();
    ds.extend_patient(&a.patient, &rows, |r| {
        enhanced.get(&(r.slice, r.sp_id)).copied().unwrap_or(false)
    })?;
    eprintln!("{} superpixels, {} enhanced", ds.len(), ds.n_enhanced());
    write_text(&a.out, &ds.to_csv())
}

fn load_data(d: &DataArgs) -> Result<LabeledDataset> {
    let ds = LabeledDataset::from_csv(&read_text(&d.features)?)?;
    Ok(match &d.select {
        Some(names) => ds.select(&names.iter().map(String::as_str).collect::<Vec<_>>())?,
        None => ds,
    })
}

fn params(p: &ParamArgs) -> Result<SvmParams> {
    let p = SvmParams::new(number(&p.rho)?, number(&p.gamma)?);
    p.validate()?;
    Ok(p)
}

fn mrmr(a: MrmrArgs) -> Result<()> {
    let ds = LabeledDataset::from_csv(&read_text(&a.input)?)?;
    let picks = mrmr_select(&ds, a.k)?;
    let mut out = String::new();
    for p in &picks {
        eprintln!(
            "{}: relevance {:.4}, score {:.4}",
            p.name, p.relevance, p.score
        );
        out.push_str(&p.name);
        out.push('\n');
    }
    write_text(&a.out, &out)
}

fn svm(c: SvmCmd) -> Result<()> {
    match c {
        SvmCmd::Train {
            data,
            params: p,
            out,
        } => {
            let model = train(&load_data(&data)?, &params(&p)?)?;
            if !model.converged {
                eprintln!("warning: SMO hit the iteration cap");
            }
            write_text(&out, &model.to_text())
        }
        SvmCmd::Predict { model, data, out } => {
            let model = SvmModel::parse(&read_text(&model)?)?;
            let ds = load_data(&data)?;
            let mut csv = String::from("patient,slice,sp_id,decision,enhanced\n");
            for r in &ds.rows {
                let (e, d) = model.predict(&r.x)?;
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.patient, r.slice, r.sp_id, d, e as u8
                ));
            }
            write_text(&out, &csv)
        }
        SvmCmd::Gridsearch {
            data,
            preset,
            seed,
            out,
        } => {
            let spec = match preset {
                GridPreset::Coarse => GridSearchSpec::coarse_only(),
                GridPreset::Paper => GridSearchSpec::paper(),
                GridPreset::Centered => GridSearchSpec::centered(),
            };
            let r = grid_search(&load_data(&data)?, &GridSearchSpec { seed, ..spec })?;
            eprintln!(
                "best: rho = {}, gamma = {}, accuracy {:.4}",
                r.rho, r.gamma, r.score
            );
            write_text(&out, &r.surface_csv())?;
            let best = serde_json::json!({ "rho": r.rho, "gamma": r.gamma, "score": r.score });
            write_text(
                &sibling(&out, "_best.json"),
                &serde_json::to_string_pretty(&best)?,
            )
        }
        SvmCmd::Validate {
            data,
            params: p,
            protocol,
            seed,
            out,
        } => {
            let protocol: Protocol = protocol.parse()?;
            let v = validate(&load_data(&data)?, &protocol, &params(&p)?, seed)?;
            let r = &v.report;
            eprintln!(
                "accuracy {:.4}, sensitivity {:.4}, specificity {:.4}, BER {:.4}, AUC {}",
                r.accuracy,
                r.sensitivity,
                r.specificity,
                r.ber,
                r.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
            write_text(&sibling(&out, "_roc.csv"), &r.roc_csv())?;
            write_text(&out, &serde_json::to_string_pretty(&v)?)
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let auto = mask(&a.auto, a.label)?;
    let manual = mask(&a.manual, a.label)?;
    let r = evaluate(&auto, &manual)?;
    let mut out = serde_json::Map::new();
    for m in &a.metrics {
        let v = match m.as_str() {
            "dice" => serde_json::json!(r.dice),
            "jaccard" => serde_json::json!(r.jaccard),
            "precision" => serde_json::json!(r.precision),
            "npv" => serde_json::json!(r.npv),
            "hausdorff" => serde_json::json!(r.hausdorff),
            "asd" => serde_json::json!(r.asd),
            other => bail!("unknown metric {other:?}"),
        };
        out.insert(m.clone(), v);
    }
    out.insert("flags".into(), serde_json::to_value(&r.flags)?);
    write_text(&a.out, &serde_json::to_string_pretty(&out)?)
}

fn gt(a: GtArgs) -> Result<()> {
    let clicks = parse_clicks(&read_text(&a.clicks)?)?;
    let sp = label_volume(&a.superpixels)?;
    let wall = mask(&a.wall, None)?;
    let maps = maps_from_label_volume(&sp, None)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut runs = Vec::new();
    for ((p, annotator, session), c) in group_clicks(&clicks) {
        if p != a.patient {
            continue;
        }
        let (m, log) = assemble_ground_truth(&c, &maps, &wall, a.ratio)?;
        eprintln!(
            "{annotator}/{session}: {} clicks, {} superpixels, {} duplicates, {} dropped",
            log.clicks, log.superpixels, log.duplicates, log.dropped
        );
        save(
            LabelVolume::from_mask(&m, 1, "scar")?,
            &a.out_dir.join(format!("{annotator}_{session}.hdr")),
        )?;
        runs.push((p, format!("{annotator}/{session}"), m));
    }
    if runs.is_empty() {
        bail!("no clicks for patient {:?}", a.patient);
    }
    if runs.len() >= 2 {
        let t = observer_variance(&runs)?;
        let mut csv = String::from("patient,a,b,dice\n");
        for r in &t.rows {
            csv.push_str(&format!("{},{},{},{}\n", r.patient, r.a, r.b, r.dice));
        }
        eprintln!("mean pairwise Dice {:.4}", t.mean_dice);
        write_text(&a.out_dir.join("observer.csv"), &csv)?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ManifestRow {
    patient: String,
    lge: String,
    #[serde(default)]
    anatomy: String,
    #[serde(default)]
    target: String,
    #[serde(default)]
    reference: String,
}

fn manifest_inputs(a: &PipelineArgs, manifest: &Path) -> Result<Vec<PatientInput>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let path = |s: &str| base.join(s);
    let clicks = match &a.clicks {
        Some(p) => group_clicks(&parse_clicks(&read_text(p)?)?),
        None => BTreeMap::new(),
    };
    let atlases = atlas_pairs(&a.atlases)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let mut inputs = Vec::new();
    for row in rdr.deserialize() {
        let row: ManifestRow = row.with_context(|| format!("in {}", manifest.display()))?;
        let anatomy = if row.anatomy.is_empty() {
            if atlases.is_empty() {
                bail!(
                    "patient {} has no anatomy and no --atlas was given",
                    row.patient
                );
            }
            AnatomySource::Atlases {
                target: (!row.target.is_empty())
                    .then(|| scalar(&path(&row.target)))
                    .transpose()?,
                atlases: atlases.clone(),
            }
        } else {
            AnatomySource::Given(label_volume(&path(&row.anatomy))?)
        };
        let sets: Vec<_> = clicks
            .iter()
            .filter(|((p, an, se), _)| {
                *p == row.patient
                    && a.annotator.as_ref().is_none_or(|x| x == an)
                    && a.session.as_ref().is_none_or(|x| x == se)
            })
            .collect();
        let Some((_, c)) = sets.first() else {
            bail!("no clicks for patient {}", row.patient);
        };
        if sets.len() > 1 {
            eprintln!(
                "{}: {} click sets, using the first; pick one with --annotator/--session",
                row.patient,
                sets.len()
            );
        }
        inputs.push(PatientInput {
            lge: scalar(&path(&row.lge))?,
            anatomy,
            clicks: c.to_vec(),
            reference_scar: (!row.reference.is_empty())
                .then(|| mask(&path(&row.reference), None))
                .transpose()?,
            id: row.patient,
        });
    }
    Ok(inputs)
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            PipelineConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    let inputs = match (&a.manifest, a.synthetic) {
        (Some(m), _) => manifest_inputs(&a, m)?,
        (None, Some(n)) => synthetic_cohort(n, a.noise, a.synthetic_atlases, cfg.seed, &cfg)?
            .into_iter()
            .map(|(_, i)| i)
            .collect(),
        (None, None) => bail!("give --manifest or --synthetic"),
    };
    let prepared = prepare_cohort(&inputs, &cfg)?;
    let outcome = run_cohort(&prepared, &cfg)?;
    let report = CohortReport::new(&outcome, &cfg);
    let out = &a.out;
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("patients.csv"), &report.patients_csv())?;
    write_text(&out.join("roc.csv"), &outcome.validation.report.roc_csv())?;
    write_text(&out.join("model.txt"), &outcome.model.to_text())?;
    if let Some(ba) = &outcome.bland_altman {
        write_text(&out.join("bland_altman.csv"), &ba.to_csv())?;
    }
    if let Some(g) = &outcome.grid {
        write_text(&out.join("grid.csv"), &g.surface_csv())?;
    }
    let mut clicks = Vec::new();
    for ((p, r), input) in prepared.iter().zip(&outcome.patients).zip(&inputs) {
        let dir = out.join(&p.id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save(
            LabelVolume::from_mask(&r.scar, 1, "scar")?,
            &dir.join("scar.hdr"),
        )?;
        clicks.extend(input.clicks.iter().map(|&click| ClickRecord {
            patient: p.id.clone(),
            annotator: a.annotator.clone().unwrap_or_else(|| "run".into()),
            session: a.session.clone().unwrap_or_else(|| "1".into()),
            click,
        }));
        if a.no_artifacts {
            continue;
        }
        p.write_artifacts(&dir)?;
        save(input.lge.clone(), &dir.join("lge.hdr"))?;
        if let Some(m) = &input.reference_scar {
            save(
                LabelVolume::from_mask(m, 1, "scar")?,
                &dir.join("reference.hdr"),
            )?;
        }
    }
    write_text(&out.join("clicks.csv"), &clicks_to_csv(&clicks))?;
    let s = &report.summary;
    eprintln!(
        "{} patients: Dice {:.3} ± {:.3}, FEP auto {:.1}%, FEP gt {:.1}%",
        s.patients, s.mean_dice, s.sd_dice, s.mean_fep_auto, s.mean_fep_gt
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Row {
        patient: String,
        dice: f64,
        fep_auto: f64,
        fep_gt: f64,
    }
    let mut rdr = csv::Reader::from_path(&a.patients)
        .with_context(|| format!("reading {}", a.patients.display()))?;
    let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        bail!("no patients in {}", a.patients.display());
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.fep_auto, r.fep_gt)).collect();
    let n = rows.len() as f64;
    let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
    let mut summary = serde_json::json!({
        "patients": rows.len(),
        "mean_dice": mean_dice,
        "ids": rows.iter().map(|r| r.patient.as_str()).collect::<Vec<_>>(),
    });
    if rows.len() >= 2 {
        let ba = bland_altman(&pairs)?;
        write_text(&a.out.join("bland_altman.csv"), &ba.to_csv())?;
        summary["bland_altman"] = serde_json::json!({
            "bias": ba.bias, "sd": ba.sd, "lower": ba.lower, "upper": ba.upper,
        });
    }
    write_text(
        &a.out.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )
}
