//! `maskguide synthesize`: rectangle-layout records written as a manifest.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use maskguide::eval::{synthetic_records, write_manifest, SyntheticSpec};
use maskguide::ClassVocabulary;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VocabArg {
    Toy,
    PascalVoc,
}

#[derive(Debug, Clone, Args)]
pub struct SynthesizeArgs {
    /// Directory receiving `manifest.jsonl`, `vocab.json` and `masks/`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Defaults match the toy generator's output size.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VocabArg::Toy)]
    pub vocab: VocabArg,
}

pub fn run(args: &SynthesizeArgs) -> Result<()> {
    let vocab = match args.vocab {
        VocabArg::Toy => ClassVocabulary::toy(),
        VocabArg::PascalVoc => ClassVocabulary::pascal_voc(),
    };
    let spec = SyntheticSpec {
        count: args.count,
        width: args.width,
        height: args.height,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        min_side: 0.25,
        max_side: 0.6,
        seed: args.seed,
    };
    let records = synthetic_records::<f64>(&spec, &vocab)?;
    write_manifest(&args.out_dir, &records, &vocab)?;
    println!("wrote {} records to {}", records.len(), args.out_dir.join("manifest.jsonl").display());
    Ok(())
}
