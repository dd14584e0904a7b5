//! Times one optimizer step of every training phase at the default desk
//! scale, to size step budgets before long runs.

use std::time::Instant;

use elite_lab::cli::RunConfig;
use elite_lab::data::dataset_sample;
use elite_lab::globalmap::train_global_step;
use elite_lab::localmap::train_local_step;
use elite_lab::model::Model;
use elite_lab::pretrain::{pretrain_encoders, train_backbone};
use elite_lab::{OptimizerState, ParamSet};

fn main() -> elite_lab::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.enc_steps = 3;
    cfg.ae_steps = 3;
    cfg.unet_steps = 3;
    cfg.dataset_size = 64;
    let mut ps = ParamSet::<f32>::new();
    let mut model = Model::build(&cfg, &mut ps)?;
    println!("parameters: {}", ps.all_refs().len());

    let t0 = Instant::now();
    pretrain_encoders(&model, &mut ps, |_, _| {})?;
    println!("encoder step: {:.3} s", t0.elapsed().as_secs_f64() / cfg.enc_steps as f64);

    model.stage = "encoders".into();
    let t0 = Instant::now();
    train_backbone(&model, &mut ps, |phase, step, _| {
        if step == 0 {
            println!("  [{phase}] first step at {:.3} s", t0.elapsed().as_secs_f64());
        }
    })?;
    println!("backbone (3 recon + stats + 3 denoise): {:.3} s", t0.elapsed().as_secs_f64());
    model.stage = "backbone".into();

    let t0 = Instant::now();
    let prepared: Vec<_> = (0..cfg.stage1_batch)
        .map(|i| {
            let s = dataset_sample::<f32>(&cfg, elite_lab::data::Split::Train, cfg.seed, i)?;
            model.prepare(&ps, &s)
        })
        .collect::<elite_lab::Result<_>>()?;
    println!("prepare {} samples: {:.3} s", prepared.len(), t0.elapsed().as_secs_f64());

    let refs: Vec<&_> = prepared.iter().collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let mut opt = OptimizerState::new(cfg.stage1_lr);
    for round in 0..2 {
        let t0 = Instant::now();
        train_global_step(&model, &mut ps, &mut opt, &refs, &mut rng)?;
        println!("stage-1 step (batch {}), round {round}: {:.3} s", refs.len(), t0.elapsed().as_secs_f64());
    }

    model.stage = "global".into();
    let refs2: Vec<&_> = prepared.iter().take(cfg.stage2_batch).collect();
    let mut opt2 = OptimizerState::new(cfg.stage2_lr);
    for round in 0..2 {
        let t0 = Instant::now();
        train_local_step(&model, &mut ps, &mut opt2, &refs2, &mut rng)?;
        println!("stage-2 step (batch {}), round {round}: {:.3} s", refs2.len(), t0.elapsed().as_secs_f64());
    }
    Ok(())
}
