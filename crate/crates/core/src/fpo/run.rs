use std::sync::mpsc::channel;
use std::thread;

use super::actors::{ClientActor, ClientOutput, Mailbox, ServerActor, ServerOutput, Shared};
pub use super::actors::{LLM_INPUT_DIM, SERVER_BLOCK};
use super::eval::evaluate_predictions;
use super::items::build_split;
use super::ledger::{Category, CommEntry, CommLedger, Direction};
use super::report::{DataSummary, ReportHeader, RoundReport, RunReport};
use super::{build_dataset, derive_seed, Dataset, FpoError, RunConfig, SLM_INPUT_DIM};
use crate::surrogate::{build_llm, build_slm, ModelConfig, SurrogateModel, Vocab};
use crate::tpa::TpaParams;

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub ledger: CommLedger,
    pub llm: SurrogateModel,
    pub slms: Vec<SurrogateModel>,
    pub tpas: Vec<TpaParams>,
}

fn model_configs(cfg: &RunConfig, vocab: &Vocab) -> (ModelConfig, ModelConfig) {
    let m = &cfg.model;
    let base = ModelConfig {
        n_layers: m.llm_layers,
        width: m.width,
        input_dim: LLM_INPUT_DIM,
        vocab_size: vocab.size(),
        lora_rank: m.lora_rank,
        adapter_depth: m.adapter_depth,
    };
    (base, ModelConfig { n_layers: m.slm_layers, input_dim: SLM_INPUT_DIM, ..base })
}

/// Generates the configured data set and trains on it.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput, FpoError> {
    let ds = build_dataset(cfg)?;
    run_on_dataset(cfg, &ds)
}

/// Trained (or initial) parameters of every actor.
#[derive(Debug, Clone)]
pub struct Models {
    pub llm: SurrogateModel,
    /// Client model layout before the adapter is dispatched.
    pub slms: Vec<SurrogateModel>,
    pub tpas: Vec<TpaParams>,
}

/// Fresh models for `cfg`: every client starts from the same SLM and TPA.
pub fn init_models(cfg: &RunConfig, ds: &Dataset) -> Result<Models, FpoError> {
    let vocab = Vocab::default();
    let (llm_cfg, slm_cfg) = model_configs(cfg, &vocab);
    let llm = build_llm(llm_cfg, derive_seed(cfg.seed, "llm", 0))?;
    let slm = build_slm(&llm, slm_cfg, derive_seed(cfg.seed, "slm", 0))?;
    let tpa = TpaParams::init(ds.norm, derive_seed(cfg.seed, "tpa", 0));
    Ok(Models { llm, slms: vec![slm; cfg.clients], tpas: vec![tpa; cfg.clients] })
}

/// Spawns the server and client actors, runs every round plus the held-out
/// exchange and evaluates the client models.
pub fn run_on_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutput, FpoError> {
    cfg.validate()?;
    check_dataset(cfg, ds)?;
    let models = init_models(cfg, ds)?;
    execute(cfg, ds, models)
}

/// Runs only the held-out exchange and evaluation with given models.
pub fn evaluate_models(cfg: &RunConfig, ds: &Dataset, models: Models) -> Result<RunOutput, FpoError> {
    cfg.validate()?;
    check_dataset(cfg, ds)?;
    let expected = init_models(cfg, ds)?;
    let shapes_match = models.slms.len() == cfg.clients
        && models.tpas.len() == cfg.clients
        && models.llm.config == expected.llm.config
        && models.slms.iter().all(|s| s.config == expected.slms[0].config)
        && models.tpas.iter().all(|t| t.param_count() == expected.tpas[0].param_count());
    if !shapes_match {
        return Err(FpoError::InvalidConfig("checkpoint does not match the configured models".into()));
    }
    let eval_cfg = RunConfig { rounds: 0, ..cfg.clone() };
    let mut out = execute(&eval_cfg, ds, models)?;
    out.report.config = cfg.clone();
    Ok(out)
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<(), FpoError> {
    if ds.partition.num_clients() != cfg.clients {
        return Err(FpoError::InvalidConfig(format!(
            "data set has {} regions for {} clients",
            ds.partition.num_clients(),
            cfg.clients
        )));
    }
    Ok(())
}

fn execute(cfg: &RunConfig, ds: &Dataset, models: Models) -> Result<RunOutput, FpoError> {
    let vocab = Vocab::default();
    let train = build_split(&ds.train, ds, &cfg.tasks, cfg, &vocab)?;
    let test = build_split(&ds.test, ds, &cfg.all_tasks(), cfg, &vocab)?;
    let Models { llm, slms, tpas } = models;
    let (tpa_parameters, slm_lora_parameters) = (tpas[0].param_count(), slms[0].lora_param_count());
    let c = cfg.clients;
    let sh = Shared { cfg, ds, vocab, train: &train, test: &test };

    let (server_tx, server_rx) = channel();
    let (client_txs, client_rxs): (Vec<_>, Vec<_>) = (0..c).map(|_| channel()).unzip();
    let (server_res, client_res) = thread::scope(|s| {
        let server = ServerActor {
            sh: &sh,
            llm: llm.clone(),
            slm_template: slms[0].clone(),
            inbox: Mailbox::new(server_rx, "server inbox".into()),
            clients: client_txs.clone(),
        };
        let sh_ref = &sh;
        let handles: Vec<_> = client_rxs
            .into_iter()
            .zip(slms)
            .zip(tpas)
            .enumerate()
            .map(|(id, ((rx, slm), tpa))| {
                let actor = ClientActor {
                    id,
                    sh: sh_ref,
                    slm,
                    tpa,
                    inbox: Mailbox::new(rx, format!("client {id} inbox")),
                    server: server_tx.clone(),
                    peers: client_txs.clone(),
                };
                s.spawn(move || actor.run())
            })
            .collect();
        drop(server_tx);
        drop(client_txs);
        let server = s.spawn(move || server.run());
        let clients: Vec<Result<ClientOutput, FpoError>> =
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(FpoError::Protocol("client panicked".into())))).collect();
        let server: Result<ServerOutput, FpoError> =
            server.join().unwrap_or_else(|_| Err(FpoError::Protocol("server panicked".into())));
        (server, clients)
    });

    // Report the root causes first; closed channels are their echoes.
    let mut errors: Vec<FpoError> = client_res.iter().filter_map(|r| r.as_ref().err()).map(|e| FpoError::Protocol(e.to_string())).collect();
    if let Err(e) = &server_res {
        errors.push(FpoError::Protocol(e.to_string()));
    }
    if !errors.is_empty() {
        let mut msgs: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
        msgs.sort_by_key(|m| m.contains("channel closed"));
        return Err(FpoError::ActorFailed(msgs));
    }
    let server = server_res.expect("checked");
    let clients: Vec<ClientOutput> = client_res.into_iter().map(|r| r.expect("checked")).collect();

    let mut ledger = server.ledger.clone();
    clients.iter().for_each(|cl| ledger.merge(&cl.ledger));
    let comm = ledger.rounds();
    let rounds: Vec<RoundReport> = server
        .rounds
        .iter()
        .map(|s| RoundReport {
            round: s.round,
            frozen: s.frozen,
            server: s.clone(),
            clients: clients.iter().map(|cl| cl.rounds[s.round as usize].clone()).collect(),
            comm: comm.iter().find(|rc| rc.round == s.round).cloned().expect("every round is marked"),
        })
        .collect();
    let eval_comm = comm.iter().find(|rc| rc.eval).cloned();
    let llm_lora_parameters = server.llm.lora_param_count();
    let mut predictions: Vec<_> = clients.iter().flat_map(|cl| cl.predictions.iter().cloned()).collect();
    predictions.sort_by_key(|p| p.key);
    let metrics = evaluate_predictions(&predictions, &ds.test, cfg, &vocab)?;
    let mut comm_totals = Vec::new();
    for dir in [Direction::ClientToServer, Direction::ServerToClient, Direction::ClientToClient] {
        for cat in [Category::Embedding, Category::Keys, Category::Result, Category::Lora, Category::TpaAgg, Category::Adapter] {
            let bytes = ledger.total(dir, cat);
            if bytes > 0 {
                let frames = ledger.round_numbers().iter().filter(|&&r| !ledger.is_eval(r)).map(|&r| ledger.frames(r, dir, cat)).sum();
                comm_totals.push(CommEntry { direction: dir, category: cat, frames, bytes });
            }
        }
    }
    let data = DataSummary {
        train_trajectories: ds.train.len(),
        test_trajectories: ds.test.len(),
        train_items: train.item_count(),
        cross_train_items: train.cross_labels().len(),
        test_items: test.item_count(),
        tpa_parameters,
        slm_lora_parameters,
        llm_lora_parameters,
    };
    let report = RunReport {
        header: ReportHeader::default(),
        config: cfg.clone(),
        data,
        rounds,
        eval_comm,
        metrics,
        comm_totals,
    };
    let (slms, tpas) = clients.into_iter().map(|cl| (cl.slm, cl.tpa)).unzip();
    Ok(RunOutput { report, ledger, llm: server.llm, slms, tpas })
}
