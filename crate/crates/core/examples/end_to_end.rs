//! Train the bundled encoder on a synthetic booking dataset and score it,
//! all through the library API. Runs on CPU in a few minutes.
//!
//! ```sh
//! cargo run --release --example end_to_end
//! ```

use slotqa::corpus::sl_to_qa;
use slotqa::decode::{predict_dataset, DecodeConfig};
use slotqa::eval::evaluate;
use slotqa::model::SpanModel;
use slotqa::reformulate::{ContextMode, PromptSpec};
use slotqa::synth::{restaurant_dataset, SynthSpec};
use slotqa::train::{run_schedule, Stage, StageLabel, StageSchedule};
use slotqa::types::{FineTuneConfig, ModelConfig, Regime};

fn main() -> slotqa::Result<()> {
    let seed = 1;
    let train_sl = restaurant_dataset(
        "demo-train",
        &SynthSpec {
            turns: 500,
            seed: 7,
            ..SynthSpec::default()
        },
    );
    let test_sl = restaurant_dataset(
        "demo-test",
        &SynthSpec {
            turns: 200,
            seed: 8,
            ..SynthSpec::default()
        },
    );

    let spec = PromptSpec::from_ontology(&train_sl.ontology);
    let qa = sl_to_qa(&train_sl, &spec, ContextMode::UserOnly)?;
    println!("{} turns -> {} qa examples", train_sl.turns.len(), qa.len());

    let model_cfg = ModelConfig {
        hidden_size: 64,
        num_layers: 2,
        num_heads: 4,
        ffn_size: 256,
        ..ModelConfig::toy()
    };
    let mut model = SpanModel::new(&model_cfg, seed)?;
    let schedule = StageSchedule::new(vec![Stage {
        label: StageLabel::Stage2,
        corpus: qa,
        config: FineTuneConfig {
            regime: Regime::Full,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 16,
            ..FineTuneConfig::stage2_default()
        },
    }])?;
    for report in run_schedule(&mut model, &schedule, seed)? {
        println!(
            "{}: {} steps, final loss {:.4}, {:.1}s",
            report.stage,
            report.steps,
            report.losses.last().copied().unwrap_or(f64::NAN),
            report.wall_time_secs
        );
    }

    let preds = predict_dataset(
        &model,
        &test_sl,
        &spec,
        ContextMode::UserOnly,
        true,
        &DecodeConfig::default(),
    )?;
    let metrics = evaluate(&preds, &test_sl, ContextMode::UserOnly, None, None)?;
    print!("{}", metrics.render_table());
    Ok(())
}
