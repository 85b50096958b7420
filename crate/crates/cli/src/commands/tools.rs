//! Codebook construction and synthetic dataset export.

use std::io::Write;
use std::path::{Path, PathBuf};

use maskmamba_core::data::{parse_index, Dataset, Label};
use maskmamba_core::image::{read_image, write_image};
use maskmamba_core::tokenizer::{decode, patch, Codebook};

use crate::error::{CliError, Result};

pub fn random_codebook(k: usize, patch: usize, channels: usize, seed: u64, out: &Path) -> Result<Codebook> {
    let cb = Codebook::random(k, patch, channels, seed)?;
    cb.save(out)?;
    Ok(cb)
}

/// Fits a codebook to every patch of the indexed images.
pub fn kmeans_codebook(index: &Path, k: usize, r: usize, iters: usize, seed: u64, out: &Path) -> Result<Codebook> {
    let text = std::fs::read_to_string(index).map_err(|e| CliError::io(index, e))?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut patches = Vec::new();
    let mut channels = 0;
    for (path, _) in parse_index(&text)? {
        let img = read_image(&root.join(path))?;
        let s = img.shape();
        if s[0] % r != 0 || s[1] % r != 0 {
            return Err(CliError::Usage(format!("image {}x{} is not divisible by patch {r}", s[0], s[1])));
        }
        channels = s[2];
        for gy in 0..s[0] / r {
            for gx in 0..s[1] / r {
                patches.push(patch(&img, r, gy, gx));
            }
        }
    }
    let cb = Codebook::kmeans(&patches, k, r, channels, iters, seed)?;
    cb.save(out)?;
    Ok(cb)
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub images: usize,
    pub classes: usize,
    pub k: usize,
    pub grid: usize,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
}

/// Writes `codebook.mmcb`, codebook-tiled images and `index.tsv`.
pub fn synth(args: &SynthArgs, log: &mut dyn Write) -> Result<Dataset> {
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let cb = random_codebook(args.k, args.patch, args.channels, args.seed, &args.out.join("codebook.mmcb"))?;
    let data = Dataset::synthetic(args.images, args.classes, args.grid, args.grid, args.k, args.seed);
    let ext = if args.channels == 1 { "pgm" } else { "ppm" };
    let mut index = String::new();
    for (i, e) in data.examples.iter().enumerate() {
        let name = format!("img_{i:04}.{ext}");
        write_image(&args.out.join(&name), &decode(&e.grid, &cb)?)?;
        let Label::Class(c) = e.label else { unreachable!("synthetic labels are classes") };
        index.push_str(&format!("{name}\t{c}\n"));
    }
    let ip = args.out.join("index.tsv");
    std::fs::write(&ip, index).map_err(|e| CliError::io(&ip, e))?;
    let _ = writeln!(log, "wrote {} images, codebook and index to {}", data.len(), args.out.display());
    Ok(data)
}
