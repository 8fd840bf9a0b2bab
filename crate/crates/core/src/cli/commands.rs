use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use super::{hash_file, AbTreatment, Command, FileHash, Manifest, ManifestEntry, RunConfig, VariantName};
use crate::data_model::{
    load_ad_instances, load_sf_instances, read_jsonl, write_jsonl, AdInstance, AdRecord, FeatureSchema,
    QueryRecord, SfInstance, UserRecord, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ab_simulate, ablation_csv, ablation_table, auc, group_analysis, OraclePolicy, ModelPolicy, Policy, RandomPolicy,
};
use crate::experiment::{ablation_run, ad_auc, sf_auc, train_model, ExperimentData, Strategy};
use crate::gradcheck::{run_all, GRADCHECK_TOLERANCE};
use crate::network::{ModelVariant, Task};
use crate::numeric::substream;
use crate::serving::{score_page, LatencySummary, PageRecord};
use crate::world::{generate_datasets, generate_world, World};

pub(super) const WORLD_FILE: &str = "world.json";
pub(super) const VOCAB_FILE: &str = "vocab.jsonl";
pub(super) const SCHEMA_FILE: &str = "schema.json";
pub(super) const SF_FILE: &str = "sf.jsonl";
pub(super) const AD_FILE: &str = "ad.jsonl";
pub(super) const PAGES_FILE: &str = "pages.jsonl";
pub(super) const CHECKPOINT_FILE: &str = "model.ckpt";

/// What a finished command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    /// False when a check-style command (gradcheck) found a failure.
    pub passed: bool,
}

/// Tracks the files a command reads and writes for the manifest.
struct Ctx<'c> {
    config: &'c RunConfig,
    out: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing input file"),
            ));
        }
        let sha256 = hash_file(path)?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(path.to_owned())
    }

    fn data_input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.config.paths.data_dir().join(name);
        self.input(&path)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.outputs.push(path.clone());
        path
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Runs one command and records it in the output directory's `run.json`.
pub fn run(command: Command, config: &RunConfig, args: &[String]) -> Result<Outcome> {
    let out = config.paths.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        config,
        out: out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let passed = match command {
        Command::Generate => generate(&mut ctx).map(|_| true),
        Command::Train => train(&mut ctx).map(|_| true),
        Command::Eval => eval(&mut ctx).map(|_| true),
        Command::GroupAnalysis => groups(&mut ctx).map(|_| true),
        Command::Ablation => ablation(&mut ctx).map(|_| true),
        Command::Abtest => abtest(&mut ctx).map(|_| true),
        Command::Refine => refine(&mut ctx).map(|_| true),
        Command::ServeBench => serve_bench(&mut ctx).map(|_| true),
        Command::Gradcheck => gradcheck(&mut ctx),
    }?;
    let versions = BTreeMap::from([
        ("attractsp".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
        ("checkpoint_format".to_owned(), CHECKPOINT_VERSION.to_string()),
    ]);
    Manifest::record(
        &out,
        ManifestEntry {
            command: command.as_str().to_owned(),
            args: args.to_vec(),
            config: config.clone(),
            config_hash: config.hash()?,
            inputs: ctx.inputs,
            outputs: ctx.outputs.iter().map(|p| p.display().to_string()).collect(),
            versions,
        },
    )?;
    Ok(Outcome {
        outputs: ctx.outputs,
        passed,
    })
}

fn generate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let world = generate_world(&cfg.world)?;
    let sets = generate_datasets(&world, &cfg.training)?;
    let schema = &world.schema;

    world.save(&ctx.output(WORLD_FILE))?;
    world.vocabulary()?.save(&ctx.output(VOCAB_FILE))?;
    schema.save(&ctx.output(SCHEMA_FILE))?;
    let sf = sets.sf.iter().map(|x| x.to_record(schema)).collect::<Result<Vec<_>>>()?;
    write_jsonl(&ctx.output(SF_FILE), &sf)?;
    let ad = sets.ad.iter().map(|x| x.to_record(schema)).collect::<Result<Vec<_>>>()?;
    write_jsonl(&ctx.output(AD_FILE), &ad)?;

    let mut rng = substream(cfg.seed, "pages");
    let mut pages = Vec::with_capacity(cfg.experiment.pages);
    for _ in 0..cfg.experiment.pages {
        let (user, query, ads) = world.sample_page(cfg.experiment.ads_per_page, &mut rng)?;
        pages.push(PageRecord {
            user: UserRecord::from_repr(&user, schema)?,
            query: QueryRecord::from_query(&query, schema)?,
            ads: ads.iter().map(|a| AdRecord::from_ad(a)).collect(),
        });
    }
    write_jsonl(&ctx.output(PAGES_FILE), &pages)?;

    let oracle = world.oracle_sf_scores(&sets.sf)?;
    let labels: Vec<bool> = sets.sf.iter().map(|x| x.label).collect();
    let oracle_auc = auc(&oracle, &labels)?;
    let rate = |n: usize, pos: usize| if n == 0 { 0.0 } else { pos as f64 / n as f64 };
    let sf_pos = labels.iter().filter(|&&l| l).count();
    let ad_pos = sets.ad.iter().filter(|x| x.label).count();
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "users,{}", world.users.len());
    let _ = writeln!(summary, "keywords,{}", world.terms.len());
    let _ = writeln!(summary, "sf_instances,{}", sets.sf.len());
    let _ = writeln!(summary, "sf_positive_rate,{}", rate(sets.sf.len(), sf_pos));
    let _ = writeln!(summary, "ad_instances,{}", sets.ad.len());
    let _ = writeln!(summary, "ad_positive_rate,{}", rate(sets.ad.len(), ad_pos));
    let _ = writeln!(summary, "oracle_sf_auc,{oracle_auc}");
    print!("{summary}");
    ctx.write("world_summary.csv", &summary)
}

struct LoadedData {
    vocab: Vocabulary,
    schema: FeatureSchema,
    sf: Vec<SfInstance>,
    ad: Vec<AdInstance>,
}

fn load_data(ctx: &mut Ctx) -> Result<LoadedData> {
    let vocab = Vocabulary::load(&ctx.data_input(VOCAB_FILE)?)?;
    let schema = FeatureSchema::load(&ctx.data_input(SCHEMA_FILE)?)?;
    let sf = load_sf_instances(&ctx.data_input(SF_FILE)?, &schema)?;
    let ad = load_ad_instances(&ctx.data_input(AD_FILE)?, &schema)?;
    Ok(LoadedData { vocab, schema, sf, ad })
}

fn configured_variant(config: &RunConfig, schema: &FeatureSchema) -> Result<ModelVariant> {
    Ok(match config.model.variant {
        VariantName::Basic => ModelVariant::Basic,
        VariantName::Multitask => ModelVariant::MultiTask,
        VariantName::Augmented => ModelVariant::Augmented {
            schema: match &config.model.features {
                Some(names) => schema.restrict(names)?,
                None => schema.clone(),
            },
        },
    })
}

fn split(data: &LoadedData, training: &crate::training::TrainingConfig, main_fraction: f64) -> Result<ExperimentData> {
    ExperimentData::split(&data.sf, &data.ad, data.vocab.len(), training, main_fraction)
}

fn train(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let data = load_data(ctx)?;
    let variant = configured_variant(cfg, &data.schema)?;
    let strategy = cfg.experiment.strategy;
    let exp = split(&data, &cfg.training, cfg.experiment.main_fraction)?;
    info!(
        "training {} with strategy {strategy} on {} SF / {} AD instances",
        variant.tag(),
        exp.sf_train.len(),
        exp.ad_train.len()
    );
    let (model, history) = train_model(strategy, variant, &cfg.model.dims, &exp, &cfg.training)?;
    let meta = CheckpointMeta {
        vocab_hash: data.vocab.content_hash(),
        strategy,
        training: cfg.training.clone(),
        main_fraction: cfg.experiment.main_fraction,
        seed: cfg.seed,
    };
    save_checkpoint(&model, &meta, &ctx.output(CHECKPOINT_FILE))?;
    println!(
        "trained {} ({strategy}): {} main batches, {} aux batches",
        model.variant.tag(),
        history.main_batches,
        history.aux_batches
    );
    ctx.write("loss.csv", &history.to_csv())
}

fn load_model(ctx: &mut Ctx, vocab: &Vocabulary) -> Result<Checkpoint> {
    let path = ctx.input(&ctx.config.paths.checkpoint_path())?;
    load_checkpoint(&path, Some(vocab))
}

fn eval(ctx: &mut Ctx) -> Result<()> {
    let data = load_data(ctx)?;
    let ckpt = load_model(ctx, &data.vocab)?;
    // the split is recomputed from the training snapshot so test data matches
    let exp = split(&data, &ckpt.meta.training, ckpt.meta.main_fraction)?;
    let tasks = match &ctx.config.experiment.eval_tasks {
        Some(t) => t.clone(),
        None if ckpt.model.check_task(Task::Aux).is_ok() => vec![Task::Main, Task::Aux],
        None => vec![Task::Main],
    };
    let mut csv = String::from("task,instances,auc\n");
    for task in tasks {
        ckpt.model.check_task(task)?;
        let (n, value) = match task {
            Task::Main => (exp.sf_test.len(), sf_auc(&ckpt.model, &exp.sf_test)?),
            Task::Aux => (exp.ad_test.len(), ad_auc(&ckpt.model, &exp.ad_test)?),
        };
        let _ = writeln!(csv, "{},{n},{value}", task.as_str());
    }
    print!("{csv}");
    ctx.write("auc.csv", &csv)
}

fn groups(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let data = load_data(ctx)?;
    let exp = split(&data, &cfg.training, cfg.experiment.main_fraction)?;
    let strategy = cfg.experiment.strategy;
    if strategy == Strategy::Basic {
        return Err(Error::InvalidConfig(
            "group-analysis compares against a multi-task model; use strategy alternate or pretrain".into(),
        ));
    }
    let dims = &cfg.model.dims;
    let (basic, _) = train_model(Strategy::Basic, ModelVariant::Basic, dims, &exp, &cfg.training)?;
    let (multi, _) = train_model(strategy, ModelVariant::MultiTask, dims, &exp, &cfg.training)?;
    let scores = vec![
        ("basic".to_owned(), crate::training::predict(&basic, &exp.sf_test)?),
        ("multitask".to_owned(), crate::training::predict(&multi, &exp.sf_test)?),
    ];
    let table = group_analysis(&exp.sf_test, &scores, &exp.main_click_counts(), &exp.aux_click_counts())?;
    let text = table.to_text();
    print!("{text}");
    ctx.write("groups.txt", &text)?;
    ctx.write("groups.csv", &table.to_csv())
}

fn ablation(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let data = load_data(ctx)?;
    let exp = split(&data, &cfg.training, cfg.experiment.main_fraction)?;
    let groups: Vec<String> = match &cfg.model.features {
        Some(names) => names.clone(),
        None => data.schema.groups.iter().map(|g| g.name.clone()).collect(),
    };
    let mut subsets: Vec<Vec<String>> = groups.iter().map(|g| vec![g.clone()]).collect();
    if groups.len() > 1 {
        subsets.push(groups.clone());
    }
    let rows = ablation_run(&data.schema, &subsets, &cfg.model.dims, &exp, &cfg.training)?;
    let text = ablation_table(&rows);
    print!("{text}");
    ctx.write("ablation.txt", &text)?;
    ctx.write("ablation.csv", &ablation_csv(&rows))
}

fn load_world(ctx: &mut Ctx) -> Result<World> {
    let path = ctx.data_input(WORLD_FILE)?;
    World::load(&path)
}

fn abtest(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let world = load_world(ctx)?;
    let k = cfg.exhibition.k;
    let mut control = RandomPolicy::new(k, substream(cfg.seed, "abtest.control"));
    let ckpt;
    let mut oracle;
    let mut model_policy;
    let treatment: &mut dyn Policy = match cfg.experiment.ab_treatment {
        AbTreatment::Oracle => {
            oracle = OraclePolicy { world: &world, k };
            &mut oracle
        }
        AbTreatment::Model => {
            ckpt = load_model(ctx, &world.vocabulary()?)?;
            model_policy = ModelPolicy { model: &ckpt.model, k };
            &mut model_policy
        }
    };
    let outcome = ab_simulate(
        &mut control,
        treatment,
        &world,
        cfg.experiment.ab_impressions,
        &mut substream(cfg.seed, "abtest"),
    )?;
    let text = outcome.to_text();
    print!("{text}");
    ctx.write("ab.txt", &text)?;
    ctx.write("ab.csv", &outcome.to_csv())
}

fn refine(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let vocab = Vocabulary::load(&ctx.data_input(VOCAB_FILE)?)?;
    let schema = FeatureSchema::load(&ctx.data_input(SCHEMA_FILE)?)?;
    let ckpt = load_model(ctx, &vocab)?;
    let pages: Vec<PageRecord> = read_jsonl(&ctx.input(&cfg.paths.pages_path())?)?;
    let mut results = Vec::new();
    for page in &pages {
        let user = page.user.to_repr(&schema)?;
        let query = page.query.to_query(&schema)?;
        let ads = page.ads.iter().map(AdRecord::to_ad).collect::<Result<Vec<_>>>()?;
        results.extend(score_page(&ckpt.model, &user, &query, &ads, &vocab, &cfg.exhibition)?.results);
    }
    println!("refined {} ads on {} pages", results.len(), pages.len());
    write_jsonl(&ctx.output("refined.jsonl"), &results)
}

fn serve_bench(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let world = load_world(ctx)?;
    let vocab = world.vocabulary()?;
    let ckpt = load_model(ctx, &vocab)?;
    let ads_per_page = cfg.experiment.ads_per_page;
    let mut rng = substream(cfg.seed, "bench.pages");
    let mut latencies = Vec::with_capacity(cfg.experiment.bench_pages);
    let mut candidates = 0;
    let mut per_page = String::from("page,elapsed_ms,unique_phrases\n");
    for i in 0..cfg.experiment.bench_pages {
        let (user, query, ads) = world.sample_page(ads_per_page, &mut rng)?;
        let ads: Vec<_> = ads.iter().map(|a| (**a).clone()).collect();
        candidates = candidates.max(ads.iter().map(|a| a.sp_candidates.len()).max().unwrap_or(0));
        let page = score_page(&ckpt.model, &user, &query, &ads, &vocab, &cfg.exhibition)?;
        let _ = writeln!(per_page, "{i},{},{}", page.elapsed.as_secs_f64() * 1e3, page.unique_phrases);
        latencies.push(page.elapsed);
    }
    let summary = LatencySummary::from_latencies(&latencies, ads_per_page, candidates);
    let csv = summary.to_csv();
    print!("{csv}");
    ctx.write("bench.csv", &csv)?;
    ctx.write("bench_pages.csv", &per_page)
}

fn gradcheck(ctx: &mut Ctx) -> Result<bool> {
    let cfg = ctx.config;
    let outcomes = run_all(cfg.experiment.gradcheck_configs, cfg.seed)?;
    let mut csv = String::from("variant,task,seed,coordinates,max_relative_error,pass\n");
    let mut failures = 0;
    for o in &outcomes {
        let pass = o.max_relative_error <= GRADCHECK_TOLERANCE;
        failures += usize::from(!pass);
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{pass}",
            o.variant.as_str(),
            o.task.as_str(),
            o.seed,
            o.coordinates,
            o.max_relative_error
        );
    }
    let worst = outcomes.iter().map(|o| o.max_relative_error).fold(0.0, f64::max);
    println!(
        "gradcheck: {} configurations, {failures} failed, worst relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
        outcomes.len()
    );
    ctx.write("gradcheck.csv", &csv)?;
    Ok(failures == 0)
}
