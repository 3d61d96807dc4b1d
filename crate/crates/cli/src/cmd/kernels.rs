use std::path::{Path, PathBuf};

use uavdet_core::ldconv::{
    ldconv_forward, load_fixture, save_fixture, LdConvFixture, LdConvSpec, OffsetField,
};
use uavdet_core::ssff::{load_config, save_config, ssff_forward, SsffConfig, DEFAULT_SIGMAS};
use uavdet_core::tensor::fmap;
use uavdet_core::tensor::FeatureMap;

use crate::output::resolve_workers;
use crate::CliError;

#[derive(Debug, Clone, clap::Subcommand)]
pub enum SsffCommand {
    /// Write a seeded random configuration.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input levels, finest first, as `CxHxW`.
        #[arg(long, value_delimiter = ',', default_value = "4x16x16,8x8x8,16x4x4")]
        levels: Vec<String>,
        #[arg(long, default_value_t = 8)]
        common_channels: usize,
        #[arg(long, default_value_t = 8)]
        c_out: usize,
        /// Fusion kernel size (odd).
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Run the forward pass.
    Run {
        #[arg(long)]
        dir: PathBuf,
        /// One FMAP file per level; without them a fixed pattern is used.
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, clap::Subcommand)]
pub enum LdconvCommand {
    /// Write seeded random weights, offsets and input.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sampling points.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        c_in: usize,
        #[arg(long, default_value_t = 8)]
        c_out: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Offsets are drawn from `±offset_scale`.
        #[arg(long, default_value_t = 1.0)]
        offset_scale: f64,
    },
    /// Run the forward pass.
    Run {
        #[arg(long)]
        dir: PathBuf,
        /// Input FMAP; defaults to the one stored with the fixture.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn parse_dims(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    match parts.as_slice() {
        [c, h, w] => {
            let p = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| invalid(format!("{s:?}: {e}")))
            };
            Ok([p(c)?, p(h)?, p(w)?])
        }
        _ => Err(invalid(format!("expected CxHxW, got {s:?}"))),
    }
}

/// Deterministic stand-in input.
fn pattern(c: usize, h: usize, w: usize, salt: usize) -> Result<FeatureMap, CliError> {
    FeatureMap::from_fn(c, h, w, |k, y, x| {
        ((k * 31 + y * 17 + x * 7 + salt * 13) as f64 * 0.37).sin()
    })
    .map_err(invalid)
}

fn load_map(p: &Path) -> Result<FeatureMap, CliError> {
    fmap::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn save_map(p: &Path, fm: &FeatureMap) -> Result<(), CliError> {
    fmap::save(p, fm).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

pub fn run_ssff(c: SsffCommand, workers: Option<usize>) -> Result<(), CliError> {
    resolve_workers(workers, None);
    match c {
        SsffCommand::Init {
            dir,
            seed,
            levels,
            common_channels,
            c_out,
            kernel,
            sigmas,
        } => {
            let dims = levels
                .iter()
                .map(|s| parse_dims(s))
                .collect::<Result<Vec<_>, _>>()?;
            let sigmas = sigmas
                .unwrap_or_else(|| DEFAULT_SIGMAS[..dims.len().min(DEFAULT_SIGMAS.len())].to_vec());
            let channels: Vec<usize> = dims.iter().map(|d| d[0]).collect();
            let cfg = SsffConfig::random(seed, &channels, common_channels, c_out, kernel, sigmas)
                .map_err(invalid)?;
            save_config(&dir, &cfg, Some(&dims)).map_err(invalid)?;
            println!("wrote {} levels to {}", dims.len(), dir.display());
        }
        SsffCommand::Run { dir, input, out } => {
            let loaded = load_config(&dir).map_err(invalid)?;
            let levels = if input.is_empty() {
                let dims = loaded
                    .level_dims
                    .ok_or_else(|| invalid("configuration stores no level sizes; pass --input"))?;
                dims.iter()
                    .enumerate()
                    .map(|(i, d)| pattern(d[0], d[1], d[2], i))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                input
                    .iter()
                    .map(|p| load_map(p))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let y = ssff_forward(&levels, &loaded.config).map_err(invalid)?;
            save_map(&out, &y)?;
            println!("output {:?}", y.shape());
        }
    }
    Ok(())
}

pub fn run_ldconv(c: LdconvCommand, workers: Option<usize>) -> Result<(), CliError> {
    resolve_workers(workers, None);
    match c {
        LdconvCommand::Init {
            dir,
            seed,
            samples,
            c_in,
            c_out,
            stride,
            height,
            width,
            offset_scale,
        } => {
            let spec = LdConvSpec::random(seed, samples, c_in, c_out, stride).map_err(invalid)?;
            let (oh, ow) = (height.div_ceil(stride), width.div_ceil(stride));
            let offsets =
                OffsetField::random(seed ^ 1, samples, oh, ow, offset_scale).map_err(invalid)?;
            let input = fmap::quantize(&pattern(c_in, height, width, 0)?);
            let fx = LdConvFixture {
                spec,
                offsets,
                input: Some(input),
            };
            save_fixture(&dir, &fx).map_err(invalid)?;
            println!("wrote fixture to {}", dir.display());
        }
        LdconvCommand::Run { dir, input, out } => {
            let fx = load_fixture(&dir).map_err(invalid)?;
            let x = match (input, fx.input) {
                (Some(p), _) => load_map(&p)?,
                (None, Some(x)) => x,
                (None, None) => return Err(invalid("fixture stores no input; pass --input")),
            };
            let y = ldconv_forward(&x, &fx.spec, &fx.offsets).map_err(invalid)?;
            save_map(&out, &y)?;
            println!("output {:?}", y.shape());
        }
    }
    Ok(())
}
