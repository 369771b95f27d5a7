//! Shared data plumbing: archive loading, chronological splits,
//! normalization, window assembly and filtering.

use std::path::Path;

use ssa_unet_core::data::{
    filter_windows, load_archive, make_windows, preprocess, FilterScope, FrameSequence,
    SampleWindow, WindowSpec,
};
use ssa_unet_core::error::{Error, Result};

use crate::args::{FilterArg, FilterScopeArg, SplitArg, TaskArg};

pub struct SplitSequences {
    pub train: FrameSequence<f32>,
    pub val: FrameSequence<f32>,
    pub test: FrameSequence<f32>,
    /// Maximum over the raw training split (the normalization constant
    /// when no checkpoint dictates one).
    pub train_max: f64,
}

/// Loads an archive, splits it chronologically and normalizes all three
/// splits by `norm` (or by the training split's maximum when absent).
pub fn load_and_split(
    data: &Path,
    splits: (f64, f64),
    norm: Option<f64>,
) -> Result<(SplitSequences, f64)> {
    let seq: FrameSequence<f32> = load_archive(data)?;
    let (train, val, test) = seq.split(splits.0, splits.1)?;
    let constant = match norm {
        Some(v) => v,
        None => train.max_value() as f64,
    };
    let (train, constant) = preprocess(&train, None, Some(constant))?;
    let (val, _) = preprocess(&val, None, Some(constant))?;
    let (test, _) = preprocess(&test, None, Some(constant))?;
    Ok((
        SplitSequences {
            train,
            val,
            test,
            train_max: constant,
        },
        constant,
    ))
}

/// Window specification for a (n_in, n_out) pair: the precipitation
/// configurations, the cloud configuration, or a generic 1..n_out ladder.
pub fn window_spec_for(in_channels: usize, out_channels: usize) -> Result<WindowSpec> {
    match (in_channels, out_channels) {
        (12, o) => WindowSpec::precip(o),
        (4, 6) => Ok(WindowSpec::cloud()),
        (n_in, o) => Ok(WindowSpec {
            n_in,
            offsets: (1..=o).collect(),
        }),
    }
}

pub fn spec_for_task(task: TaskArg, outputs: usize) -> Result<WindowSpec> {
    match task {
        TaskArg::Precip => WindowSpec::precip(outputs),
        TaskArg::Cloud => {
            if outputs != 6 {
                return Err(Error::config(format!(
                    "the cloud task predicts 6 frames, got --outputs {outputs}"
                )));
            }
            Ok(WindowSpec::cloud())
        }
    }
}

pub fn task_in_channels(task: TaskArg) -> usize {
    match task {
        TaskArg::Precip => 12,
        TaskArg::Cloud => 4,
    }
}

pub fn scope_of(arg: FilterScopeArg) -> FilterScope {
    match arg {
        FilterScopeArg::All => FilterScope::AllFrames,
        FilterScopeArg::Any => FilterScope::AnyFrame,
    }
}

/// Windows of one split with the rain-fraction filter applied.
pub fn windows_of(
    seq: &FrameSequence<f32>,
    spec: &WindowSpec,
    stride: usize,
    filter: FilterArg,
    scope: FilterScopeArg,
    rain_cutoff: f64,
) -> Result<Vec<SampleWindow<f32>>> {
    let windows = make_windows(seq, spec, stride)?;
    Ok(filter_windows(
        windows,
        filter.theta(),
        rain_cutoff,
        scope_of(scope),
    ))
}

pub fn pick_split<'a>(s: &'a SplitSequences, which: SplitArg) -> Vec<&'a FrameSequence<f32>> {
    match which {
        SplitArg::Train => vec![&s.train],
        SplitArg::Val => vec![&s.val],
        SplitArg::Test => vec![&s.test],
        SplitArg::Full => vec![&s.train, &s.val, &s.test],
    }
}

pub fn split_name(which: SplitArg) -> &'static str {
    match which {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::Full => "full",
    }
}
