use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{Receiver, Sender};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::eval::ItemPrediction;
use super::items::{candidate_tokens, positive_token, ClientView, FederatedSplit, POOLED_T};
use super::ledger::{Category, CommLedger, Direction};
use super::report::{ClientLosses, ClientRoundReport, ServerLosses, ServerRoundReport};
use super::schedule::{is_frozen, multi_task_loss, FreezeSchedule};
use super::{derive_seed, Dataset, FpoError, RunConfig, SLM_INPUT_DIM};
use crate::autodiff::{Adam, AdamConfig, Graph, NodeId, Tensor};
use crate::secure_agg::{aggregate_masked, block_keys, mask_block, partition_params, Frame, MaskedBlock, RoundConfig};
use crate::surrogate::{dispatch_adapter, return_adapter, LayerTrain, ModelOptimizer, SurrogateModel, Token, Vocab};
use crate::tasks::TaskKind;
use crate::tke::{
    aggregate_lora, build_prompt, featurize_prompt, forward_kl_loss, layers_to_train, reverse_kl_loss, select_layers,
    ChangeTracker, Information, PromptData, PROMPT_FEATURES,
};
use crate::tpa::{Embedding, PointKey, TpaParams, EMBED_DIM};
use crate::traj::SpatioTemporalPoint;

/// Per-point server input: embedding, scaled differences to the union
/// neighbours and to their interpolation, neighbour flags and time gaps.
pub const SERVER_BLOCK: usize = 4 * EMBED_DIM + 5;
pub const LLM_INPUT_DIM: usize = PROMPT_FEATURES + SERVER_BLOCK;
const DIFF_SCALE: f64 = 50.0;

// Frame block ids inside uploads and results.
const BLOCK_KEYS: u16 = 0;
const BLOCK_QUERIES: u16 = 1;
const BLOCK_TASK: u16 = 2;

pub(crate) enum ToServer {
    Upload { round: u32, client: usize, frames: Vec<Frame> },
    Lora { round: u32, client: usize, frames: Vec<Frame> },
}

pub(crate) enum ToClient {
    Dispatch { frames: Vec<Frame> },
    Result { round: u32, frames: Vec<Frame> },
    Global { round: u32, frames: Vec<Frame> },
    Masked { round: u32, frame: Frame },
    Averaged { round: u32, frame: Frame },
}

/// Receiver that buffers messages until the actor asks for them, so the
/// processing order never depends on arrival order.
pub(crate) struct Mailbox<T> {
    rx: Receiver<T>,
    pending: VecDeque<T>,
    name: String,
}

impl<T> Mailbox<T> {
    pub(crate) fn new(rx: Receiver<T>, name: String) -> Self {
        Self { rx, pending: VecDeque::new(), name }
    }

    fn take(&mut self, mut want: impl FnMut(&T) -> bool) -> Result<T, FpoError> {
        if let Some(i) = self.pending.iter().position(&mut want) {
            return Ok(self.pending.remove(i).expect("index in range"));
        }
        loop {
            let m = self.rx.recv().map_err(|_| FpoError::ChannelClosed(self.name.clone()))?;
            if want(&m) {
                return Ok(m);
            }
            self.pending.push_back(m);
        }
    }
}

fn send<T>(tx: &Sender<T>, m: T, to: &str) -> Result<(), FpoError> {
    tx.send(m).map_err(|_| FpoError::ChannelClosed(to.to_string()))
}

/// Read-only inputs shared by every actor.
pub(crate) struct Shared<'a> {
    pub cfg: &'a RunConfig,
    pub ds: &'a Dataset,
    pub vocab: Vocab,
    pub train: &'a FederatedSplit,
    pub test: &'a FederatedSplit,
}

impl Shared<'_> {
    fn clients(&self) -> usize {
        self.cfg.clients
    }

    fn schedule(&self) -> FreezeSchedule {
        FreezeSchedule::new(self.cfg.freeze_period)
    }

    /// Adam settings for `round`, with the rate decaying linearly to
    /// `lr_floor * lr` at the last round.
    fn adam(&self, lr: f64, round: usize) -> AdamConfig {
        let t = self.cfg;
        let frac = if t.rounds > 1 { round as f64 / (t.rounds - 1) as f64 } else { 0.0 };
        AdamConfig::with_lr(lr * (1.0 - (1.0 - t.train.lr_floor) * frac))
    }
}

fn matrix(rows: &[&[f64]], cols: usize) -> Result<Tensor, FpoError> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    rows.iter().for_each(|r| data.extend_from_slice(r));
    Ok(Tensor::new(vec![rows.len(), cols], data)?)
}

fn keys_frame(round: u32, block: u16, origin: usize, keys: impl Iterator<Item = (usize, i64)>) -> Frame {
    Frame::new(round, block, origin as u16, keys.flat_map(|(traj, t)| [traj as f64, t as f64]).collect())
}

fn parse_keys(f: &Frame) -> Result<Vec<(usize, i64)>, FpoError> {
    if f.values.len() % 2 != 0 {
        return Err(FpoError::Protocol("odd key frame".into()));
    }
    Ok(f.values.chunks(2).map(|k| (k[0] as usize, k[1] as i64)).collect())
}

fn lerp(a: &[f64], b: &[f64], f: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect()
}

fn sample_rows(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut v: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    v.sort_unstable();
    v
}

/// Draws about `frac * k` rows from `pos` and the rest from `neg`.
fn sample_stratified(rng: &mut ChaCha8Rng, pos: &[usize], neg: &[usize], k: usize, frac: f64) -> Vec<usize> {
    if pos.is_empty() || neg.is_empty() || frac == 0.0 {
        let all: Vec<usize> = if pos.is_empty() { neg.to_vec() } else { [pos, neg].concat() };
        return sample_rows(rng, &all, k);
    }
    let kp = ((k as f64 * frac).round() as usize).clamp(1, k.saturating_sub(1).max(1));
    let mut v = sample_rows(rng, pos, kp);
    v.extend(sample_rows(rng, neg, k - v.len().min(k)));
    v.sort_unstable();
    v
}

/// Adds the summed cross-entropy of each task's rows to the graph.
fn task_losses(g: &mut Graph, logits: NodeId, groups: &[(Vec<usize>, Vec<usize>)]) -> Result<Option<NodeId>, FpoError> {
    let mut losses = Vec::new();
    for (rows, targets) in groups.iter().filter(|(r, _)| !r.is_empty()) {
        let sel = g.select_rows(logits, rows)?;
        losses.push(g.cross_entropy(sel, targets)?);
    }
    if losses.is_empty() {
        return Ok(None);
    }
    Ok(Some(multi_task_loss(g, &losses)?))
}

fn lora_snapshots(m: &SurrogateModel) -> Vec<Vec<f64>> {
    m.layers.iter().map(|l| l.lora_flat()).collect()
}

// ---------------------------------------------------------------- server

/// Union of the uploaded embeddings, per trajectory ordered by time.
#[derive(Default)]
struct Union {
    by_traj: BTreeMap<usize, Vec<(i64, Vec<f64>)>>,
}

impl Union {
    fn neighbours(&self, traj: usize, t: i64) -> (Option<&(i64, Vec<f64>)>, Option<&(i64, Vec<f64>)>, Option<&(i64, Vec<f64>)>) {
        let Some(u) = self.by_traj.get(&traj) else { return (None, None, None) };
        let i = u.partition_point(|x| x.0 < t);
        let exact = u.get(i).filter(|x| x.0 == t);
        let next = if exact.is_some() { u.get(i + 1) } else { u.get(i) };
        (i.checked_sub(1).map(|j| &u[j]), exact, next)
    }

    /// Estimate of the embedding at `t` from the neighbours on either side.
    fn context(&self, traj: usize, t: i64) -> Vec<f64> {
        match self.neighbours(traj, t) {
            (Some(a), _, Some(b)) => lerp(&a.1, &b.1, (t - a.0) as f64 / (b.0 - a.0).max(1) as f64),
            (Some(a), _, None) => a.1.clone(),
            (None, _, Some(b)) => b.1.clone(),
            (None, Some(e), None) => e.1.clone(),
            (None, None, None) => vec![0.0; EMBED_DIM],
        }
    }

    fn block(&self, traj: usize, t: i64) -> [f64; SERVER_BLOCK] {
        let (prev, exact, next) = self.neighbours(traj, t);
        let mut out = [0.0; SERVER_BLOCK];
        let e = match exact {
            Some(x) => x.1.clone(),
            None => self.context(traj, t),
        };
        out[..EMBED_DIM].copy_from_slice(&e);
        if let Some(p) = prev {
            for k in 0..EMBED_DIM {
                out[EMBED_DIM + k] = DIFF_SCALE * (e[k] - p.1[k]);
            }
            out[4 * EMBED_DIM] = 1.0;
            out[4 * EMBED_DIM + 3] = ((t - p.0) as f64 / 10.0).ln_1p();
        }
        if let Some(n) = next {
            for k in 0..EMBED_DIM {
                out[2 * EMBED_DIM + k] = DIFF_SCALE * (n.1[k] - e[k]);
            }
            out[4 * EMBED_DIM + 1] = 1.0;
            out[4 * EMBED_DIM + 4] = ((n.0 - t) as f64 / 10.0).ln_1p();
        }
        if let (Some(_), Some(p), Some(n)) = (exact, prev, next) {
            let mid = lerp(&p.1, &n.1, (t - p.0) as f64 / (n.0 - p.0).max(1) as f64);
            for k in 0..EMBED_DIM {
                out[3 * EMBED_DIM + k] = DIFF_SCALE * (e[k] - mid[k]);
            }
        }
        out[4 * EMBED_DIM + 2] = f64::from(u8::from(exact.is_none()));
        out
    }

    fn pooled_block(&self, traj: usize) -> [f64; SERVER_BLOCK] {
        let mut out = [0.0; SERVER_BLOCK];
        let Some(u) = self.by_traj.get(&traj) else { return out };
        for (t, _) in u {
            for (o, v) in out.iter_mut().zip(self.block(traj, *t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= u.len().max(1) as f64);
        out
    }

    fn embeddings(&self, traj: usize) -> Vec<Embedding> {
        self.by_traj
            .get(&traj)
            .map(|u| u.iter().map(|(t, e)| Embedding { key: PointKey::new(&traj.to_string(), *t), e: e.clone() }).collect())
            .unwrap_or_default()
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (traj, u) in &self.by_traj {
            h.update((*traj as u64).to_le_bytes());
            for (t, e) in u {
                h.update(t.to_le_bytes());
                e.iter().for_each(|v| h.update(v.to_le_bytes()));
            }
        }
        let d: [u8; 32] = h.finalize().into();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn points(&self) -> usize {
        self.by_traj.values().map(Vec::len).sum()
    }
}

struct ServerItem {
    task: TaskKind,
    features: Vec<f64>,
    p_slm: Vec<f64>,
    label: Option<usize>,
}

/// What one client's upload asked for.
struct UploadIndex {
    points: Vec<(usize, i64)>,
    queries: Vec<(usize, i64)>,
    /// Per task: item keys and client distributions (empty in evaluation).
    tasks: Vec<(TaskKind, Vec<(usize, i64)>, Vec<f64>)>,
}

fn parse_upload(frames: &[Frame], tasks: &[TaskKind], vocab: usize) -> Result<(UploadIndex, Vec<(usize, i64, Vec<f64>)>), FpoError> {
    let mut it = frames.iter();
    let mut next = |what: &str| it.next().ok_or_else(|| FpoError::Protocol(format!("upload lacks {what}")));
    let points = parse_keys(next("point keys")?)?;
    let emb = next("embeddings")?;
    if emb.values.len() != points.len() * EMBED_DIM {
        return Err(FpoError::Protocol("embedding count does not match keys".into()));
    }
    let queries = parse_keys(next("queries")?)?;
    let mut out = Vec::new();
    for &task in tasks {
        let keys = parse_keys(next("item keys")?)?;
        let probs = next("distributions")?;
        if probs.values.len() != keys.len() * vocab {
            return Err(FpoError::Protocol("distribution count does not match items".into()));
        }
        out.push((task, keys, probs.values.clone()));
    }
    let embedded = points.iter().zip(emb.values.chunks(EMBED_DIM)).map(|(&(tr, t), e)| (tr, t, e.to_vec())).collect();
    Ok((UploadIndex { points, queries, tasks: out }, embedded))
}

pub(crate) struct ServerOutput {
    pub llm: SurrogateModel,
    pub rounds: Vec<ServerRoundReport>,
    pub ledger: CommLedger,
}

pub(crate) struct ServerActor<'a> {
    pub sh: &'a Shared<'a>,
    pub llm: SurrogateModel,
    pub slm_template: SurrogateModel,
    pub inbox: Mailbox<ToServer>,
    pub clients: Vec<Sender<ToClient>>,
}

impl ServerActor<'_> {
    pub(crate) fn run(mut self) -> Result<ServerOutput, FpoError> {
        let sh = self.sh;
        let cfg = sh.cfg;
        let c = sh.clients();
        let vsize = sh.vocab.size();
        let mut ledger = CommLedger::new();
        let mut reports = Vec::with_capacity(cfg.rounds);
        let mut opt = ModelOptimizer::new(&self.llm);
        let mut tracker = ChangeTracker::new(self.llm.n_layers());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "server", 0));
        let labels = sh.train.cross_labels();
        let slm_adapter = self.slm_template.config.adapter_start();
        let llm_adapter = self.llm.config.adapter_start();
        // Server-side record of the clients' foundation LoRA.
        let mut global: Vec<Vec<f64>> = self.slm_template.layers.iter().map(|l| l.lora_flat()).collect();

        // Hand the adapter to every client.
        let bundle = dispatch_adapter(&mut self.llm);
        let frames: Vec<Frame> = bundle
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| Frame::new(0, (slm_adapter + k) as u16, u16::MAX, [l.dense_flat(), l.lora_flat()].concat()))
            .collect();
        for tx in &self.clients {
            ledger.record_all(0, Direction::ServerToClient, Category::Adapter, &frames);
            send(tx, ToClient::Dispatch { frames: frames.clone() }, "client")?;
        }

        let mut union = Union::default();
        let mut items: Vec<ServerItem> = Vec::new();
        for r in 0..cfg.rounds {
            let round = r as u32;
            let frozen = is_frozen(r, &sh.schedule());
            ledger.mark_round(round, frozen, false);
            if !frozen {
                let (u, it) = self.exchange(round, &mut ledger, Some(&labels))?;
                union = u;
                items = it;
            }

            // Objectives on the stored data.
            let nm = layers_to_train(cfg.m, self.llm.n_layers());
            let plan = select_layers(&tracker.ratios(), nm, derive_seed(cfg.seed, "server-select", r as u64), round)?;
            let train_plan: Vec<LayerTrain> =
                (0..self.llm.n_layers()).map(|l| if plan.selected.contains(&l) { LayerTrain::LORA } else { LayerTrain::FROZEN }).collect();
            let mut losses = ServerLosses::default();
            let [w_kl, w_task] = cfg.train.server_weights;
            let adam = sh.adam(cfg.train.server_lr, r);
            if !items.is_empty() && nm > 0 {
                for _ in 0..cfg.train.local_steps {
                    let mut rows = Vec::new();
                    for &task in &cfg.tasks {
                        let pool: Vec<usize> = (0..items.len()).filter(|&i| items[i].task == task).collect();
                        rows.extend(sample_rows(&mut rng, &pool, cfg.train.batch_size));
                    }
                    let mut g = Graph::new();
                    let x = g.constant(matrix(&rows.iter().map(|&i| items[i].features.as_slice()).collect::<Vec<_>>(), LLM_INPUT_DIM)?)?;
                    let tape = self.llm.attach(&mut g, x, &train_plan)?;
                    let p_slm = g.constant(matrix(&rows.iter().map(|&i| items[i].p_slm.as_slice()).collect::<Vec<_>>(), vsize)?)?;
                    let kl = forward_kl_loss(&mut g, tape.probs, p_slm)?;
                    let groups: Vec<(Vec<usize>, Vec<usize>)> = cfg
                        .tasks
                        .iter()
                        .map(|&task| {
                            rows.iter()
                                .enumerate()
                                .filter_map(|(k, &i)| (items[i].task == task).then_some(items[i].label.map(|l| (k, l))).flatten())
                                .unzip()
                        })
                        .collect();
                    let task_loss = task_losses(&mut g, tape.logits, &groups)?;
                    let wkl = g.scale(kl, w_kl)?;
                    let total = match task_loss {
                        Some(t) => {
                            let wt = g.scale(t, w_task)?;
                            g.add(wkl, wt)?
                        }
                        None => wkl,
                    };
                    losses.forward_kl += g.value(kl).item();
                    losses.task += task_loss.map_or(0.0, |t| g.value(t).item());
                    losses.total += g.value(total).item();
                    let grads = g.backward(total)?;
                    let g = self.llm.collect_grads(&grads, &tape, &train_plan);
                    opt.step(&mut self.llm, &g, &adam)?;
                }
                let s = cfg.train.local_steps.max(1) as f64;
                losses.forward_kl /= s;
                losses.task /= s;
                losses.total /= s;
            }

            // Aggregate client LoRA and send the global version back.
            let mut uploads = Vec::with_capacity(c);
            for client in 0..c {
                let m = self.inbox.take(|m| matches!(m, ToServer::Lora { round: rr, client: cc, .. } if *rr == round && *cc == client))?;
                if let ToServer::Lora { frames, .. } = m {
                    uploads.push(frames);
                }
            }
            let n_slm = self.slm_template.n_layers();
            let mut updated = vec![None; n_slm];
            for (l, slot) in updated.iter_mut().enumerate() {
                let ups: Vec<(&[f64], f64)> = uploads
                    .iter()
                    .flatten()
                    .filter(|f| f.block as usize == l)
                    .map(|f| {
                        let (w, n) = f.values.split_at(f.values.len() - 1);
                        (w, n[0])
                    })
                    .collect();
                if ups.is_empty() {
                    continue;
                }
                let prev = if l >= slm_adapter {
                    self.llm.layers[llm_adapter + l - slm_adapter].lora_flat()
                } else {
                    global[l].clone()
                };
                *slot = Some(aggregate_lora(&ups, &prev, c, cfg.model.aggregation)?);
            }
            if updated[slm_adapter..].iter().any(Option::is_some) {
                let mut bundle = dispatch_adapter(&mut self.llm);
                for (k, layer) in bundle.layers.iter_mut().enumerate() {
                    if let Some(w) = &updated[slm_adapter + k] {
                        layer.set_lora_flat(w)?;
                    }
                }
                return_adapter(&mut self.llm, &bundle)?;
            }
            let mut frames = Vec::new();
            for l in 0..n_slm {
                if l >= slm_adapter {
                    let w = self.llm.layers[llm_adapter + l - slm_adapter].lora_flat();
                    frames.push(Frame::new(round, l as u16, u16::MAX, w));
                } else if let Some(w) = updated[l].take() {
                    global[l] = w.clone();
                    frames.push(Frame::new(round, l as u16, u16::MAX, w));
                }
            }
            for tx in &self.clients {
                ledger.record_all(round, Direction::ServerToClient, Category::Adapter, &frames);
                send(tx, ToClient::Global { round, frames: frames.clone() }, "client")?;
            }
            let layer_stats = tracker.update(&lora_snapshots(&self.llm))?.to_vec();
            reports.push(ServerRoundReport {
                round,
                frozen,
                losses,
                selection: plan,
                layer_stats,
                union_points: union.points(),
                union_digest: union.digest(),
                items: items.len(),
            });
        }

        // Context exchange for the held-out split.
        let eval_round = cfg.rounds as u32;
        ledger.mark_round(eval_round, false, true);
        self.exchange(eval_round, &mut ledger, None)?;
        Ok(ServerOutput { llm: self.llm, rounds: reports, ledger })
    }

    /// Receives every client's upload, answers each with contexts and, in
    /// training, the server distributions for its cross-client items.
    fn exchange(
        &mut self,
        round: u32,
        ledger: &mut CommLedger,
        labels: Option<&BTreeMap<super::ItemKey, usize>>,
    ) -> Result<(Union, Vec<ServerItem>), FpoError> {
        let sh = self.sh;
        let c = sh.clients();
        let vsize = sh.vocab.size();
        let tasks: &[TaskKind] = if labels.is_some() { &sh.cfg.tasks } else { &[] };
        let mut indices = Vec::with_capacity(c);
        let mut union = Union::default();
        for client in 0..c {
            let m = self
                .inbox
                .take(|m| matches!(m, ToServer::Upload { round: rr, client: cc, .. } if *rr == round && *cc == client))?;
            let ToServer::Upload { frames, .. } = m else { unreachable!("matched upload") };
            let (index, embedded) = parse_upload(&frames, tasks, vsize).map_err(|_| FpoError::MissingBatch { round, client })?;
            for (traj, t, e) in embedded {
                union.by_traj.entry(traj).or_default().push((t, e));
            }
            indices.push(index);
        }
        union.by_traj.values_mut().for_each(|u| u.sort_by_key(|x| x.0));

        let mut prompts: BTreeMap<(TaskKind, usize), Vec<f64>> = BTreeMap::new();
        let mut items = Vec::new();
        for (client, index) in indices.iter().enumerate() {
            let mut frames = Vec::with_capacity(1 + tasks.len());
            let ctx: Vec<f64> = index.points.iter().chain(&index.queries).flat_map(|&(tr, t)| union.context(tr, t)).collect();
            frames.push(Frame::new(round, 0, u16::MAX, ctx));
            for (k, (task, keys, p_slm)) in index.tasks.iter().enumerate() {
                let mut rows = Vec::with_capacity(keys.len());
                for &(traj, t) in keys {
                    if !prompts.contains_key(&(*task, traj)) {
                        let emb = union.embeddings(traj);
                        let info = Information { road: Some(&sh.ds.road), weather: None };
                        let p = build_prompt(*task, PromptData::Embeddings(&emb), info, task.format())?;
                        prompts.insert((*task, traj), featurize_prompt(&p, &sh.ds.norm));
                    }
                    let block = if t == POOLED_T { union.pooled_block(traj) } else { union.block(traj, t) };
                    let mut f = prompts[&(*task, traj)].clone();
                    f.extend_from_slice(&block);
                    rows.push(f);
                }
                let probs = if rows.is_empty() {
                    Vec::new()
                } else {
                    let x = matrix(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>(), LLM_INPUT_DIM)?;
                    self.llm.forward(&x)?.into_data()
                };
                frames.push(Frame::new(round, BLOCK_TASK + k as u16, u16::MAX, probs));
                let labels = labels.expect("tasks only in training");
                for ((&(traj, t), f), p) in keys.iter().zip(rows).zip(p_slm.chunks(vsize)) {
                    let key = super::ItemKey { task: *task, traj: traj as u32, t };
                    items.push(ServerItem { task: *task, features: f, p_slm: p.to_vec(), label: labels.get(&key).copied() });
                }
            }
            ledger.record_all(round, Direction::ServerToClient, Category::Result, &frames);
            send(&self.clients[client], ToClient::Result { round, frames }, "client")?;
        }
        Ok((union, items))
    }
}

// ---------------------------------------------------------------- client

pub(crate) struct ClientOutput {
    pub slm: SurrogateModel,
    pub tpa: TpaParams,
    pub rounds: Vec<ClientRoundReport>,
    pub ledger: CommLedger,
    pub predictions: Vec<ItemPrediction>,
}

pub(crate) struct ClientActor<'a> {
    pub id: usize,
    pub sh: &'a Shared<'a>,
    pub slm: SurrogateModel,
    pub tpa: TpaParams,
    pub inbox: Mailbox<ToClient>,
    pub server: Sender<ToServer>,
    pub peers: Vec<Sender<ToClient>>,
}

/// Client-side working set for one split.
struct Working<'v> {
    view: &'v ClientView,
    feats: Vec<[f64; SLM_INPUT_DIM]>,
    contexts: BTreeMap<(usize, i64), SpatioTemporalPoint>,
}

impl<'v> Working<'v> {
    fn new(view: &'v ClientView, ds: &Dataset) -> Self {
        let contexts = BTreeMap::new();
        let feats = view.items.iter().map(|it| view.features(it, &contexts, ds)).collect();
        Self { view, feats, contexts }
    }

    fn refresh_cross(&mut self, ds: &Dataset) {
        for (i, it) in self.view.items.iter().enumerate().filter(|(_, it)| it.cross) {
            self.feats[i] = self.view.features(it, &self.contexts, ds);
        }
    }

    fn rows(&self, idx: &[usize]) -> Result<Tensor, FpoError> {
        matrix(&idx.iter().map(|&i| self.feats[i].as_slice()).collect::<Vec<_>>(), SLM_INPUT_DIM)
    }
}

impl ClientActor<'_> {
    fn tag(&self) -> String {
        format!("client {}", self.id)
    }

    pub(crate) fn run(mut self) -> Result<ClientOutput, FpoError> {
        let sh = self.sh;
        let cfg = sh.cfg;
        let vsize = sh.vocab.size();
        let mut ledger = CommLedger::new();
        let mut reports = Vec::with_capacity(cfg.rounds);
        let mut opt = ModelOptimizer::new(&self.slm);
        let mut tpa_opt = Adam::new(self.tpa.param_count());
        let mut tracker = ChangeTracker::new(self.slm.n_layers());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "client", self.id as u64));

        let ToClient::Dispatch { frames } = self.inbox.take(|m| matches!(m, ToClient::Dispatch { .. }))? else {
            unreachable!("matched dispatch")
        };
        for f in &frames {
            let layer = &mut self.slm.layers[f.block as usize];
            let (dense, lora) = f.values.split_at(layer.dense_len());
            layer.set_dense_flat(dense)?;
            layer.set_lora_flat(lora)?;
        }

        let view = &sh.train.clients[self.id];
        let mut work = Working::new(view, sh.ds);
        let local_points: Vec<SpatioTemporalPoint> = view.segments.iter().flat_map(|s| s.points.iter().copied()).collect();
        // (positive, other) item indices per task.
        let by_task: Vec<(Vec<usize>, Vec<usize>)> = cfg
            .tasks
            .iter()
            .map(|&t| {
                let pos = positive_token(t, &sh.vocab).or((t == TaskKind::TSim).then(|| sh.vocab.id(Token::Keep)));
                (0..view.items.len())
                    .filter(|&i| view.items[i].key.task == t)
                    .partition(|&i| Some(view.items[i].target) == pos)
            })
            .collect();
        let n_items = view.items.len().max(1) as f64;
        let mut p_llm: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

        for r in 0..cfg.rounds {
            let round = r as u32;
            let frozen = is_frozen(r, &sh.schedule());
            ledger.mark_round(round, frozen, false);
            let mut uploaded = 0;
            if !frozen {
                let (cross_items, results) = self.exchange(round, &mut work, true, &mut ledger)?;
                uploaded = view.cross_points().len();
                p_llm.clear();
                for (i, p) in cross_items.into_iter().zip(results) {
                    p_llm.insert(i, p);
                }
            }

            let nm = layers_to_train(cfg.m, self.slm.n_layers());
            let seed = derive_seed(cfg.seed, "client-select", (self.id as u64) << 32 | r as u64);
            let plan = select_layers(&tracker.ratios(), nm, seed, round)?;
            let train_plan: Vec<LayerTrain> = (0..self.slm.n_layers())
                .map(|l| LayerTrain {
                    dense: cfg.model.train_foundation && !self.slm.is_adapter(l),
                    lora: plan.selected.contains(&l),
                })
                .collect();
            let [w_rec, w_kl, w_task] = cfg.train.client_weights;
            let adam = sh.adam(cfg.train.lr, r);
            let tpa_adam = sh.adam(cfg.train.tpa_lr, r);
            let mut losses = ClientLosses::default();
            for _ in 0..cfg.train.local_steps {
                // Reconstruction.
                if !local_points.is_empty() {
                    let mut rec = 0.0;
                    for _ in 0..cfg.train.tpa_steps {
                        let idx = sample_rows(&mut rng, &(0..local_points.len()).collect::<Vec<_>>(), cfg.train.tpa_batch);
                        let batch: Vec<SpatioTemporalPoint> = idx.iter().map(|&i| local_points[i]).collect();
                        let (loss, mut grad) = self.tpa.loss_and_grad(&batch)?;
                        if w_rec > 0.0 {
                            grad.iter_mut().for_each(|g| *g *= w_rec);
                            let mut flat = self.tpa.to_flat();
                            tpa_opt.step(&mut flat, &grad, &tpa_adam);
                            self.tpa.load_flat(&flat)?;
                        }
                        rec += loss;
                    }
                    losses.reconstruction += rec / cfg.train.tpa_steps.max(1) as f64;
                }
                // Reverse KL on cross-client items and the task loss.
                let rows: Vec<usize> = by_task
                    .iter()
                    .flat_map(|(pos, neg)| {
                        sample_stratified(&mut rng, pos, neg, cfg.train.batch_size, cfg.train.positive_fraction)
                    })
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let mut g = Graph::new();
                let x = g.constant(work.rows(&rows)?)?;
                let tape = self.slm.attach(&mut g, x, &train_plan)?;
                let groups: Vec<(Vec<usize>, Vec<usize>)> = cfg
                    .tasks
                    .iter()
                    .map(|&task| {
                        rows.iter()
                            .enumerate()
                            .filter(|(_, &i)| view.items[i].key.task == task)
                            .map(|(k, &i)| (k, view.items[i].target))
                            .unzip()
                    })
                    .collect();
                let task_loss = task_losses(&mut g, tape.logits, &groups)?.expect("rows are non-empty");
                let mut total = g.scale(task_loss, w_task)?;
                losses.task += g.value(task_loss).item();
                let cross: Vec<(usize, &Vec<f64>)> =
                    rows.iter().enumerate().filter_map(|(k, i)| p_llm.get(i).map(|p| (k, p))).collect();
                if !cross.is_empty() {
                    let sel = g.select_rows(tape.probs, &cross.iter().map(|c| c.0).collect::<Vec<_>>())?;
                    let target = g.constant(matrix(&cross.iter().map(|c| c.1.as_slice()).collect::<Vec<_>>(), vsize)?)?;
                    let kl = reverse_kl_loss(&mut g, sel, target)?;
                    losses.reverse_kl += g.value(kl).item();
                    let wkl = g.scale(kl, w_kl)?;
                    total = g.add(total, wkl)?;
                }
                let grads = g.backward(total)?;
                let g = self.slm.collect_grads(&grads, &tape, &train_plan);
                opt.step(&mut self.slm, &g, &adam)?;
            }
            let s = cfg.train.local_steps.max(1) as f64;
            losses.reconstruction /= s;
            losses.reverse_kl /= s;
            losses.task /= s;
            losses.total = w_rec * losses.reconstruction + w_kl * losses.reverse_kl + w_task * losses.task;

            // Upload selected LoRA layers, install the global ones.
            let frames: Vec<Frame> = plan
                .selected
                .iter()
                .map(|&l| {
                    let mut v = self.slm.layers[l].lora_flat();
                    v.push(n_items);
                    Frame::new(round, l as u16, self.id as u16, v)
                })
                .collect();
            ledger.record_all(round, Direction::ClientToServer, Category::Lora, &frames);
            send(&self.server, ToServer::Lora { round, client: self.id, frames }, "server")?;
            let ToClient::Global { frames, .. } =
                self.inbox.take(|m| matches!(m, ToClient::Global { round: rr, .. } if *rr == round))?
            else {
                unreachable!("matched global")
            };
            for f in &frames {
                self.slm.layers[f.block as usize].set_lora_flat(&f.values)?;
            }
            if !frozen {
                self.aggregate_tpa(round, &mut ledger)?;
            }
            let layer_stats = tracker.update(&lora_snapshots(&self.slm))?.to_vec();
            reports.push(ClientRoundReport { client: self.id, round, losses, selection: plan, layer_stats, uploaded_points: uploaded });
        }

        // Held-out evaluation with fresh contexts.
        let eval_round = cfg.rounds as u32;
        ledger.mark_round(eval_round, false, true);
        let test_view = &sh.test.clients[self.id];
        let mut test = Working::new(test_view, sh.ds);
        self.exchange(eval_round, &mut test, false, &mut ledger)?;
        let predictions = self.predict(&test)?;
        Ok(ClientOutput { slm: self.slm, tpa: self.tpa, rounds: reports, ledger, predictions })
    }

    /// Uploads embeddings of cross-client points (plus, in training, the
    /// client distributions of cross-client items), then installs the
    /// returned contexts. Returns the cross items and their server
    /// distributions.
    fn exchange(
        &mut self,
        round: u32,
        work: &mut Working<'_>,
        training: bool,
        ledger: &mut CommLedger,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>), FpoError> {
        let sh = self.sh;
        let view = work.view;
        let pts = view.cross_points();
        let gaps = view.cross_gaps();
        let key_of = |&(s, p): &(usize, usize)| (view.segments[s].traj, view.segments[s].points[p].t);
        let emb = if pts.is_empty() {
            Vec::new()
        } else {
            let norm: Vec<[f64; 3]> =
                pts.iter().map(|&(s, p)| sh.ds.norm.normalize(&view.segments[s].points[p])).collect::<Result<_, _>>()?;
            let x = Tensor::new(vec![pts.len(), 3], norm.as_flattened().to_vec())?;
            self.tpa.encode_features(&x)?.into_data()
        };
        let mut frames = vec![keys_frame(round, BLOCK_KEYS, self.id, pts.iter().map(key_of))];
        ledger.record(round, Direction::ClientToServer, Category::Keys, &frames[0]);
        let ef = Frame::new(round, BLOCK_KEYS, self.id as u16, emb);
        ledger.record(round, Direction::ClientToServer, Category::Embedding, &ef);
        frames.push(ef);
        let qf = keys_frame(round, BLOCK_QUERIES, self.id, gaps.iter().copied());
        ledger.record(round, Direction::ClientToServer, Category::Keys, &qf);
        frames.push(qf);

        let mut cross_items = Vec::new();
        if training {
            for (k, &task) in sh.cfg.tasks.iter().enumerate() {
                let idx: Vec<usize> =
                    (0..view.items.len()).filter(|&i| view.items[i].cross && view.items[i].key.task == task).collect();
                let kf = keys_frame(
                    round,
                    BLOCK_TASK + k as u16,
                    self.id,
                    idx.iter().map(|&i| (view.items[i].key.traj as usize, view.items[i].key.t)),
                );
                let probs = if idx.is_empty() { Vec::new() } else { self.slm.forward(&work.rows(&idx)?)?.into_data() };
                let pf = Frame::new(round, BLOCK_TASK + k as u16, self.id as u16, probs);
                ledger.record(round, Direction::ClientToServer, Category::Keys, &kf);
                ledger.record(round, Direction::ClientToServer, Category::Result, &pf);
                frames.push(kf);
                frames.push(pf);
                cross_items.extend(idx);
            }
        }
        send(&self.server, ToServer::Upload { round, client: self.id, frames }, "server")?;

        let tag = self.tag();
        let ToClient::Result { frames, .. } = self.inbox.take(|m| matches!(m, ToClient::Result { round: rr, .. } if *rr == round))?
        else {
            unreachable!("matched result")
        };
        let ctx = frames.first().ok_or_else(|| FpoError::Protocol(format!("{tag}: empty result")))?;
        let n_ctx = pts.len() + gaps.len();
        if ctx.values.len() != n_ctx * EMBED_DIM {
            return Err(FpoError::Protocol(format!("{tag}: {} context values for {n_ctx} queries", ctx.values.len())));
        }
        if n_ctx > 0 {
            let dec = self.tpa.decode_features(&Tensor::new(vec![n_ctx, EMBED_DIM], ctx.values.clone())?)?;
            let keys = pts.iter().map(key_of).chain(gaps.iter().copied());
            for (k, key) in keys.enumerate() {
                let row = dec.row(k);
                work.contexts.insert(key, sh.ds.norm.denormalize(&[row[0], row[1], row[2]]));
            }
        }
        work.refresh_cross(sh.ds);

        let vsize = sh.vocab.size();
        let mut results = Vec::with_capacity(cross_items.len());
        for f in frames.iter().skip(1) {
            results.extend(f.values.chunks(vsize).map(<[f64]>::to_vec));
        }
        if results.len() != cross_items.len() {
            return Err(FpoError::Protocol(format!("{tag}: {} results for {} items", results.len(), cross_items.len())));
        }
        Ok((cross_items, results))
    }

    /// Masked averaging of the TPA parameters with the other clients: block
    /// k is aggregated by client k and broadcast to everyone else.
    fn aggregate_tpa(&mut self, round: u32, ledger: &mut CommLedger) -> Result<(), FpoError> {
        let c = self.sh.clients();
        let me = self.id;
        let flat = self.tpa.to_flat();
        let blocks = partition_params(&flat, c)?;
        let rc = RoundConfig::new(derive_seed(self.sh.cfg.seed, "secure-agg", 0), round);
        let mut own = None;
        for b in &blocks {
            let keys = block_keys(&rc, c, b.k, b.values.len());
            let m = mask_block(b, me, &keys)?;
            if b.k == me {
                own = Some(m);
            } else {
                let frame = Frame::new(round, b.k as u16, me as u16, m.values);
                ledger.record(round, Direction::ClientToClient, Category::TpaAgg, &frame);
                send(&self.peers[b.k], ToClient::Masked { round, frame }, "peer")?;
            }
        }
        let mut averaged: Vec<Option<Vec<f64>>> = vec![None; blocks.len()];
        if let Some(own) = own {
            let mut received = vec![own];
            for origin in (0..c).filter(|&o| o != me) {
                let ToClient::Masked { frame, .. } = self.inbox.take(
                    |m| matches!(m, ToClient::Masked { round: rr, frame } if *rr == round && frame.origin as usize == origin),
                )?
                else {
                    unreachable!("matched masked block")
                };
                received.push(MaskedBlock { k: me, origin, values: frame.values });
            }
            let avg = aggregate_masked(&received, c)?;
            for dest in (0..c).filter(|&d| d != me) {
                let frame = Frame::new(round, me as u16, me as u16, avg.clone());
                ledger.record(round, Direction::ClientToClient, Category::TpaAgg, &frame);
                send(&self.peers[dest], ToClient::Averaged { round, frame }, "peer")?;
            }
            averaged[me] = Some(avg);
        }
        for k in (0..blocks.len()).filter(|&k| k != me) {
            let ToClient::Averaged { frame, .. } = self
                .inbox
                .take(|m| matches!(m, ToClient::Averaged { round: rr, frame } if *rr == round && frame.block as usize == k))?
            else {
                unreachable!("matched broadcast")
            };
            averaged[k] = Some(frame.values);
        }
        let global: Vec<f64> = averaged.into_iter().map(|a| a.expect("every block received")).collect::<Vec<_>>().concat();
        self.tpa.load_flat(&global)?;
        Ok(())
    }

    fn predict(&self, work: &Working<'_>) -> Result<Vec<ItemPrediction>, FpoError> {
        let view = work.view;
        if view.items.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.slm.forward(&work.rows(&(0..view.items.len()).collect::<Vec<_>>())?)?;
        let vocab = &self.sh.vocab;
        let keep = vocab.id(Token::Keep);
        Ok(view
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let row = probs.row(i);
                let cands = candidate_tokens(it.key.task, vocab);
                let pred = cands.iter().copied().fold(cands[0], |best, c| if row[c] > row[best] { c } else { best });
                let score_tok = positive_token(it.key.task, vocab).unwrap_or(keep);
                ItemPrediction { key: it.key, client: self.id, pred, target: it.target, score: row[score_tok] }
            })
            .collect())
    }
}
