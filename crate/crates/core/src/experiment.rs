//! End-to-end runs: data preparation, training with per-round evaluation,
//! and the run-directory artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fedprompt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::ccmp::{ClassPriors, PrototypeBank};
use crate::config::{ExperimentConfig, PartitionMode};
use crate::data::{apply_domain_shift, generate_synthetic, partition_dirichlet, partition_pathological, split_like, Partition};
use crate::error::{CoreError, Result};
use crate::eval::{comm_accounting, evaluate_clients, heldout_split, CommReport, CommSpec, EvalReport};
use crate::federation::{ClientData, Federation, RoundLog, ServerState};
use crate::model::{embed_image, init_backbone, BackboneWeights, PromptParams};

/// Everything derived from a config before training starts.
pub struct Prepared {
    pub backbone: BackboneWeights,
    pub clients: Vec<ClientData>,
    pub train_partition: Partition,
    pub test_partition: Partition,
    /// Clients eligible for sampling, ascending.
    pub participating: Vec<usize>,
    pub heldout: Vec<usize>,
}

pub fn make_partition(config: &ExperimentConfig, labels: &[usize]) -> Result<Partition> {
    let (nc, n) = (config.data.num_classes, config.train.num_clients);
    match config.partition {
        PartitionMode::Pathological { classes_per_client } => {
            partition_pathological(labels, nc, n, classes_per_client, config.seed)
        }
        PartitionMode::Dirichlet { beta } => partition_dirichlet(labels, nc, n, beta, config.seed),
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let mut data = generate_synthetic(&config.data, config.seed)?;
    let train_partition = make_partition(config, &data.train_labels())?;
    let test_partition = split_like(&train_partition, &data.test_labels(), config.data.num_classes)?;
    apply_domain_shift(&mut data.train, &train_partition, &config.data.domains);
    apply_domain_shift(&mut data.test, &test_partition, &config.data.domains);
    let backbone = init_backbone(&config.model, config.seed)?;
    let nc = config.data.num_classes;
    let mut clients = Vec::with_capacity(config.train.num_clients);
    for id in 0..config.train.num_clients {
        let embed = |split: &[crate::data::Sample], shard: &[usize]| -> Result<Vec<(Tensor, usize)>> {
            shard
                .iter()
                .map(|&i| Ok((embed_image(&backbone, &split[i].pixels)?, split[i].label)))
                .collect()
        };
        clients.push(ClientData {
            id,
            train: embed(&data.train, &train_partition.shards[id])?,
            test: embed(&data.test, &test_partition.shards[id])?,
            priors: train_partition.priors[id].clone().unwrap_or_else(|| ClassPriors::uniform(nc)),
        });
    }
    let (mut participating, heldout) = match config.heldout_fraction {
        Some(f) => heldout_split(config.train.num_clients, f, config.seed)?,
        None => ((0..config.train.num_clients).collect(), Vec::new()),
    };
    let empty: Vec<usize> = participating.iter().copied().filter(|&id| clients[id].train.is_empty()).collect();
    if !empty.is_empty() {
        log::warn!("clients {empty:?} have no training data and never participate");
        participating.retain(|id| !empty.contains(id));
    }
    Ok(Prepared {
        backbone,
        clients,
        train_partition,
        test_partition,
        participating,
        heldout,
    })
}

/// One line of `metrics.csv`. Row 0 is the warm-started state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: Option<f64>,
    pub mean_acc: f64,
    pub worst_acc: f64,
    pub heldout_mean_acc: Option<f64>,
    pub heldout_worst_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub participating: EvalReport,
    pub heldout: Option<EvalReport>,
    pub heldout_clients: Vec<usize>,
    /// Ids that ever took part in a round.
    pub trained_clients: Vec<usize>,
    pub backbone_checksum_start: String,
    pub backbone_checksum_end: String,
    pub communication: CommReport,
}

pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub logs: Vec<RoundLog>,
    pub report: FinalReport,
    pub state: ServerState,
}

pub fn evaluate_split(prep: &Prepared, state: &ServerState, config: &ExperimentConfig) -> Result<(EvalReport, Option<EvalReport>)> {
    let pick = |ids: &[usize]| ids.iter().map(|&i| &prep.clients[i]).collect::<Vec<_>>();
    let part = evaluate_clients(&prep.backbone, state, &pick(&prep.participating), &config.train)?;
    let held = if prep.heldout.is_empty() {
        None
    } else {
        Some(evaluate_clients(&prep.backbone, state, &pick(&prep.heldout), &config.train)?)
    };
    Ok((part, held))
}

pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let prep = prepare(config)?;
    run_prepared(config, &prep)
}

pub fn run_prepared(config: &ExperimentConfig, prep: &Prepared) -> Result<RunOutcome> {
    let checksum_start = prep.backbone.checksum();
    let fed = Federation::new(&prep.backbone, &config.train, &prep.clients, prep.participating.clone(), config.seed)?
        .with_workers(config.workers)?;
    let mut metrics = Vec::with_capacity(config.train.rounds + 1);
    let mut logs = Vec::with_capacity(config.train.rounds);
    let state = fed.run_training(|state, log| {
        let (part, held) = evaluate_split(prep, state, config)?;
        metrics.push(MetricsRow {
            round: state.round,
            train_loss: log.map(|l| l.train_loss),
            mean_acc: part.mean,
            worst_acc: part.worst,
            heldout_mean_acc: held.as_ref().map(|h| h.mean),
            heldout_worst_acc: held.as_ref().map(|h| h.worst),
        });
        if let Some(l) = log {
            logs.push(l.clone());
        }
        Ok(())
    })?;
    let checksum_end = prep.backbone.checksum();
    let (participating, heldout) = evaluate_split(prep, &state, config)?;
    let mut trained: Vec<usize> = logs.iter().flat_map(|l| l.participants.iter().copied()).collect();
    trained.sort_unstable();
    trained.dedup();
    let report = FinalReport {
        strategy: config.train.strategy.name().to_string(),
        seed: config.seed,
        rounds: config.train.rounds,
        participating,
        heldout,
        heldout_clients: prep.heldout.clone(),
        trained_clients: trained,
        backbone_checksum_start: format!("{checksum_start:016x}"),
        backbone_checksum_end: format!("{checksum_end:016x}"),
        communication: comm_accounting(&CommSpec::from_config(&config.train, config.data.num_classes, config.model.dim)),
    };
    Ok(RunOutcome {
        metrics,
        logs,
        report,
        state,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CoreError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["round", "train_loss", "mean_acc", "worst_acc", "heldout_mean_acc", "heldout_worst_acc"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            opt(r.train_loss),
            r.mean_acc.to_string(),
            r.worst_acc.to_string(),
            opt(r.heldout_mean_acc),
            opt(r.heldout_worst_acc),
        ])?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Long format: `owner, block, row, col, value`. The owner is `global` or
/// `client-<id>` for personalized prompt blocks. Values print in the
/// shortest form that parses back to the same bits.
pub fn write_prompts(path: &Path, state: &ServerState) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["owner", "block", "row", "col", "value"])?;
    let mut owners: Vec<(String, &PromptParams)> = vec![("global".into(), &state.global)];
    owners.extend(state.personal.iter().map(|(id, p)| (format!("client-{id}"), p)));
    for (owner, params) in owners {
        for (name, t) in params.blocks() {
            let (rows, cols) = t.matrix_dims();
            for r in 0..rows {
                for c in 0..cols {
                    w.write_record([owner.clone(), name.to_string(), r.to_string(), c.to_string(), t.at(r, c).to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Long format: `layer, class, dim, value`.
pub fn write_prototypes(path: &Path, bank: Option<&PrototypeBank>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "class", "dim", "value"])?;
    if let Some(bank) = bank {
        for &layer in bank.layers() {
            for (c, proto) in bank.layer(layer)?.iter().enumerate() {
                for (j, v) in proto.iter().enumerate() {
                    w.write_record([layer.to_string(), c.to_string(), j.to_string(), v.to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Writes every run artifact into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write(&dir.join("config.json"), &config.to_json()?)?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    write(&dir.join("final_report.json"), &serde_json::to_string_pretty(&outcome.report)?)?;
    write_prompts(&dir.join("prompts.csv"), &outcome.state)?;
    write_prototypes(&dir.join("prototypes.csv"), outcome.state.bank.as_ref())?;
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| CoreError::Data(format!("{}: cannot parse `{field}`", path.display())))
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(CoreError::Data(format!("{}: expected {width} columns", path.display())));
        }
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

fn fill(params: &mut PromptParams, block: &str, row: usize, col: usize, value: f64) -> Result<()> {
    let t = params
        .blocks_mut()
        .into_iter()
        .find(|(n, _)| *n == block)
        .map(|(_, t)| t)
        .ok_or_else(|| CoreError::Data(format!("unknown prompt block {block}")))?;
    let (rows, cols) = t.matrix_dims();
    if row >= rows || col >= cols {
        return Err(CoreError::Data(format!("{block}[{row},{col}] out of range")));
    }
    t.data_mut()[row * cols + col] = value;
    Ok(())
}

/// Rebuilds the final server state of a run directory. Blocks absent from
/// `prompts.csv` stay at zero; the bank's pending buffer is empty.
pub fn load_state(dir: &Path, config: &ExperimentConfig) -> Result<ServerState> {
    let template = PromptParams::init(
        config.model.dim,
        config.train.num_shared_prompts,
        config.data.num_classes,
        0.0,
        0,
    )?;
    let mut global = template.clone();
    let mut personal: BTreeMap<usize, PromptParams> = BTreeMap::new();
    let path = dir.join("prompts.csv");
    for row in read_rows(&path, 5)? {
        let (r, c, v): (usize, usize, f64) = (parse(&path, &row[2])?, parse(&path, &row[3])?, parse(&path, &row[4])?);
        let target = if row[0] == "global" {
            &mut global
        } else {
            let id = row[0]
                .strip_prefix("client-")
                .ok_or_else(|| CoreError::Data(format!("unknown owner {}", row[0])))?;
            personal.entry(parse(&path, id)?).or_insert_with(|| template.clone())
        };
        fill(target, &row[1], r, c, v)?;
    }
    let bank = if config.train.strategy.uses_ccmp() {
        let opts = config.train.forward_options();
        let (nc, d) = (config.data.num_classes, config.model.dim);
        let mut bank = PrototypeBank::new(&opts.ccmp_layers, nc, d, config.train.rho, config.train.update_period)?;
        let mut mu: BTreeMap<usize, Vec<Vec<f64>>> =
            opts.ccmp_layers.iter().map(|&l| (l, vec![vec![0.0; d]; nc])).collect();
        let path = dir.join("prototypes.csv");
        for row in read_rows(&path, 4)? {
            let (l, c, j, v): (usize, usize, usize, f64) =
                (parse(&path, &row[0])?, parse(&path, &row[1])?, parse(&path, &row[2])?, parse(&path, &row[3])?);
            let slot = mu
                .get_mut(&l)
                .and_then(|m| m.get_mut(c))
                .and_then(|p| p.get_mut(j))
                .ok_or_else(|| CoreError::Data(format!("prototype ({l}, {c}, {j}) out of range")))?;
            *slot = v;
        }
        for (l, protos) in mu {
            bank.set_layer(l, protos)?;
        }
        Some(bank)
    } else {
        None
    };
    Ok(ServerState {
        global,
        personal,
        bank,
        round: config.train.rounds,
    })
}

/// Re-evaluates a saved run directory from its config and parameters.
pub fn reevaluate(dir: &Path) -> Result<(EvalReport, Option<EvalReport>)> {
    let config = ExperimentConfig::load(&dir.join("config.json"))?;
    let prep = prepare(&config)?;
    let state = load_state(dir, &config)?;
    evaluate_split(&prep, &state, &config)
}

/// Partition tables: `(client, sample_index, label)` and per-client label
/// histograms.
pub fn write_partition(dir: &Path, config: &ExperimentConfig) -> Result<Partition> {
    config.validate()?;
    let data = generate_synthetic(&config.data, config.seed)?;
    let labels = data.train_labels();
    let partition = make_partition(config, &labels)?;
    if !partition.is_disjoint_cover(labels.len()) {
        return Err(CoreError::Protocol("partition is not a disjoint cover".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let path = dir.join("partition.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["client", "sample_index", "label"])?;
    for (client, shard) in partition.shards.iter().enumerate() {
        for &i in shard {
            w.write_record([client.to_string(), i.to_string(), labels[i].to_string()])?;
        }
    }
    w.flush().map_err(|e| CoreError::io(&path, e))?;
    let path = dir.join("histograms.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["client".to_string()];
    header.extend((0..config.data.num_classes).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (client, h) in partition.histograms.iter().enumerate() {
        let mut rec = vec![client.to_string()];
        rec.extend(h.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CoreError::io(&path, e))?;
    Ok(partition)
}
