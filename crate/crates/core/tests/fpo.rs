use trajfed_core::fpo::{
    build_dataset, run_on_dataset, run_training, Category, Direction, RunConfig, RunOutput,
};
use trajfed_core::tasks::TaskKind;
use trajfed_core::tpa::EMBED_DIM;

const HEADER: u64 = 12;

fn tiny(clients: usize, rounds: usize, period: usize) -> RunConfig {
    let mut cfg = RunConfig { clients, rounds, freeze_period: period, ..RunConfig::default() };
    (cfg.data.grid_rows, cfg.data.grid_cols) = match clients {
        1 => (1, 1),
        2 => (1, 2),
        _ => (2, 2),
    };
    cfg.data.users = 3;
    cfg.data.trajectories = 8;
    cfg.data.points_per_traj = 40;
    cfg.model.width = 16;
    cfg.train.local_steps = 1;
    cfg.train.batch_size = 16;
    cfg.train.tpa_steps = 2;
    cfg.train.tpa_batch = 32;
    cfg
}

fn run(cfg: &RunConfig) -> RunOutput {
    run_training(cfg).expect("run succeeds")
}

/// Points whose context window reaches another client, counted straight from
/// the region owner of every training point.
fn cross_point_oracle(cfg: &RunConfig) -> usize {
    let ds = build_dataset(cfg).unwrap();
    let r = cfg.train.context_radius;
    ds.train
        .iter()
        .map(|s| {
            let owners: Vec<usize> = s.traj.points.iter().map(|p| ds.partition.client_of(p).unwrap()).collect();
            (0..owners.len())
                .filter(|&i| {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(owners.len() - 1);
                    owners[lo..=hi].iter().any(|&o| o != owners[i])
                })
                .count()
        })
        .sum()
}

#[test]
fn single_client_single_round_has_one_exchange() {
    let cfg = tiny(1, 1, 1);
    let out = run(&cfg);
    let l = &out.ledger;
    assert_eq!(l.frames(0, Direction::ClientToServer, Category::Embedding), 1);
    // One result message: the context frame plus one frame per task.
    assert_eq!(l.frames(0, Direction::ServerToClient, Category::Result), 1 + cfg.tasks.len() as u64);
    // Nothing crosses a region boundary, so the upload carries no payload.
    assert_eq!(l.bytes(0, Direction::ClientToServer, Category::Embedding), HEADER);
    assert_eq!(l.total(Direction::ClientToClient, Category::TpaAgg), 0);
    assert_eq!(out.report.rounds.len(), 1);
    assert_eq!(out.report.rounds[0].clients[0].uploaded_points, 0);
}

#[test]
fn embedding_bytes_follow_cross_point_count() {
    let cfg = tiny(4, 3, 2);
    let out = run(&cfg);
    let cross = cross_point_oracle(&cfg) as u64;
    assert!(cross > 0, "the tiny data set should span regions");
    let expected = cross * EMBED_DIM as u64 * 8 + HEADER * cfg.clients as u64;
    for r in [0u32, 2] {
        assert_eq!(out.ledger.bytes(r, Direction::ClientToServer, Category::Embedding), expected, "round {r}");
    }
    let uploaded: usize = out.report.rounds[0].clients.iter().map(|c| c.uploaded_points).sum();
    assert_eq!(uploaded as u64, cross);
}

#[test]
fn frozen_rounds_move_no_embeddings_or_results() {
    let cfg = tiny(4, 5, 2);
    let out = run(&cfg);
    for r in 0..cfg.rounds as u32 {
        let frozen = r % 2 == 1;
        assert_eq!(out.ledger.is_frozen(r), frozen);
        assert_eq!(out.report.rounds[r as usize].frozen, frozen);
        for dir in [Direction::ClientToServer, Direction::ServerToClient] {
            for cat in [Category::Embedding, Category::Result, Category::Keys] {
                let b = out.ledger.bytes(r, dir, cat);
                if frozen {
                    assert_eq!(b, 0, "round {r} {dir:?} {cat:?}");
                } else if dir == Direction::ClientToServer || cat == Category::Result {
                    assert!(b > 0, "round {r} {dir:?} {cat:?}");
                }
            }
        }
        let tpa = out.ledger.bytes(r, Direction::ClientToClient, Category::TpaAgg);
        assert_eq!(tpa == 0, frozen, "round {r}");
    }
}

#[test]
fn frozen_rounds_train_on_the_last_union() {
    let cfg = tiny(4, 5, 2);
    let out = run(&cfg);
    let rounds = &out.report.rounds;
    for r in 1..rounds.len() {
        let last_fresh = r - r % 2;
        assert_eq!(rounds[r].server.union_digest, rounds[last_fresh].server.union_digest);
        assert_eq!(rounds[r].server.union_points, rounds[last_fresh].server.union_points);
    }
    assert!(rounds[0].server.union_points > 0);
}

#[test]
fn clients_share_tpa_parameters_after_aggregation() {
    let cfg = tiny(4, 3, 2);
    let out = run(&cfg);
    let first = out.tpas[0].to_flat();
    for t in &out.tpas[1..] {
        let flat = t.to_flat();
        let gap = first.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-9, "TPA parameters differ by {gap}");
    }
}

#[test]
fn client_adapters_match_the_server_adapter() {
    let cfg = tiny(4, 2, 2);
    let out = run(&cfg);
    let slm_start = cfg.model.slm_layers - cfg.model.adapter_depth;
    let llm_start = cfg.model.llm_layers - cfg.model.adapter_depth;
    for slm in &out.slms {
        for k in 0..cfg.model.adapter_depth {
            let a = &slm.layers[slm_start + k];
            let b = &out.llm.layers[llm_start + k];
            assert_eq!(a.lora_flat(), b.lora_flat(), "adapter layer {k}");
            assert_eq!(a.dense_flat(), b.dense_flat(), "adapter layer {k}");
        }
    }
}

#[test]
fn lora_uploads_scale_with_selected_layers() {
    let mut frames = Vec::new();
    for m in [0.25, 0.5, 1.0] {
        let mut cfg = tiny(2, 1, 1);
        cfg.m = m;
        let out = run(&cfg);
        frames.push(out.ledger.frames(0, Direction::ClientToServer, Category::Lora));
    }
    // N = 4 client layers: 1, 2 and 4 layers per client.
    assert_eq!(frames, vec![2, 4, 8]);
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = tiny(4, 3, 2);
    let ds = build_dataset(&cfg).unwrap();
    let a = run_on_dataset(&cfg, &ds).unwrap();
    let b = run_on_dataset(&cfg, &ds).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.ledger, b.ledger);
}

#[test]
fn unseen_tasks_are_evaluated_but_not_trained() {
    let mut cfg = tiny(2, 1, 1);
    cfg.tasks = vec![TaskKind::NF];
    cfg.unseen_tasks = vec![TaskKind::SPD];
    let out = run(&cfg);
    let seen: Vec<(TaskKind, bool)> = out.report.metrics.iter().map(|m| (m.report.task, m.seen)).collect();
    assert_eq!(seen, vec![(TaskKind::NF, true), (TaskKind::SPD, false)]);
    // Only the trained task travels in training rounds.
    assert_eq!(out.ledger.frames(0, Direction::ServerToClient, Category::Result), 2 * 2);
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let mut cfg = tiny(4, 1, 1);
    cfg.clients = 3;
    assert!(run_training(&cfg).is_err());
}
