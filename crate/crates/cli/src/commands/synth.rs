//! `synth`: writes a deterministic scene corpus and its manifest.

use vidsgg_data::formats::{save_manifest, save_scene, Manifest};
use vidsgg_data::{generate_scene, SynthConfig};

use crate::args::SynthArgs;
use crate::error::{io_at, CliError};

pub fn run(args: &SynthArgs) -> Result<(), CliError> {
    let base = SynthConfig {
        seed: args.seed,
        entity_range: (args.entities_min, args.entities_max),
        entity_categories: args.entity_categories,
        predicate_categories: args.predicate_categories,
        frames: args.frames,
        relation_range: (args.relations_min, args.relations_max),
        multi_instance_prob: args.multi_instance_prob,
        noise: args.noise,
        fps: args.fps,
        d_a: args.d_a,
        d_v: args.d_v,
    };
    base.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_at(&args.out, e))?;
    let mut manifest = Manifest::default();
    for i in 0..args.scenes {
        let stem = format!("train-{i:04}");
        let scene = generate_scene(&SynthConfig { seed: args.seed + i as u64, ..base });
        save_scene(&args.out, &stem, &scene)?;
        manifest.train.push(stem);
    }
    for i in 0..args.val_scenes {
        let stem = format!("val-{i:04}");
        let scene =
            generate_scene(&SynthConfig { seed: args.seed + (args.scenes + i) as u64, ..base });
        save_scene(&args.out, &stem, &scene)?;
        manifest.val.push(stem);
    }
    save_manifest(&manifest, &args.out.join("manifest.json"))?;
    println!(
        "wrote {} train + {} val scenes to {}",
        args.scenes,
        args.val_scenes,
        args.out.display()
    );
    Ok(())
}
