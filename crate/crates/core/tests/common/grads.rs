use super::{narrow, randn};
use fpm_sv::autograd::{Alignment, Conv2dGeom, Tape, TransposedGeom, Var};
use fpm_sv::config::{AggregationMode, FpmVariant, LossConfig, LossKind, PoolingKind};
use fpm_sv::gradcheck::{grad_check_params, GradCheckOptions, GradReport};
use fpm_sv::model::SpeakerModel;
use fpm_sv::nn::{Ctx, Mode, ParamStore};
use fpm_sv::{Result, Tensor};

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

/// Scalar `sum(y * r)` for a fixed random `r`, so every output coordinate counts.
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let seed = shape.iter().fold(7u64, |a, &d| a * 31 + d as u64);
    let r = tape.leaf(randn(&shape, seed), false);
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| 0.5 + v.abs())
}

pub fn op_cases() -> Vec<OpCase> {
    let case = |name, inputs, f: OpFn| OpCase { name, inputs, f };
    vec![
        case("conv2d", vec![randn(&[2, 3, 5, 6], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dGeom::new(1, 1))?;
            project(t, y)
        }),
        case("conv2d strided", vec![randn(&[1, 2, 7, 6], 4), randn(&[3, 2, 3, 3], 5)], |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dGeom { stride: (2, 1), pad: (1, 0) })?;
            project(t, y)
        }),
        case("conv_transpose2d", vec![randn(&[2, 3, 3, 4], 6), randn(&[3, 2, 2, 2], 7), randn(&[2], 8)], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), TransposedGeom::new(2, 0))?;
            project(t, y)
        }),
        case("conv_transpose2d padded", vec![randn(&[1, 2, 3, 3], 9), randn(&[2, 3, 4, 4], 10)], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], None, TransposedGeom::new(2, 1))?;
            project(t, y)
        }),
        case("batch_norm_train", vec![randn(&[3, 2, 2, 3], 11), positive(&[2], 12), randn(&[2], 13)], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }),
        case("batch_norm_eval", vec![randn(&[2, 2, 3, 2], 14), randn(&[2], 15), randn(&[2], 16)], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)?;
            project(t, y)
        }),
        case("upsample half-pixel", vec![randn(&[1, 2, 3, 4], 17)], |t, v| {
            let y = t.upsample_bilinear(v[0], 2, Alignment::HalfPixel)?;
            project(t, y)
        }),
        case("upsample align-corners", vec![randn(&[2, 1, 3, 3], 18)], |t, v| {
            let y = t.upsample_bilinear(v[0], 2, Alignment::AlignCorners)?;
            project(t, y)
        }),
        case("reflect_pad_time", vec![randn(&[1, 2, 2, 5], 19)], |t, v| {
            let y = t.reflect_pad_time(v[0], 8)?;
            project(t, y)
        }),
        case("add mul scale", vec![randn(&[2, 3], 20), randn(&[2, 3], 21)], |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[0])?;
            let y = t.scale(m, -1.7)?;
            project(t, y)
        }),
        case("relu", vec![randn(&[3, 4], 22)], |t, v| {
            let y = t.relu(v[0])?;
            project(t, y)
        }),
        case("tanh", vec![randn(&[3, 4], 23)], |t, v| {
            let y = t.tanh(v[0])?;
            project(t, y)
        }),
        case("reshape transpose", vec![randn(&[2, 3, 4], 24)], |t, v| {
            let a = t.transpose12(v[0])?;
            let y = t.reshape(a, &[8, 3])?;
            project(t, y)
        }),
        case("concat", vec![randn(&[2, 3, 4], 25), randn(&[2, 2, 4], 26)], |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 1)?;
            project(t, y)
        }),
        case("mean_all", vec![randn(&[2, 3, 2], 27)], |t, v| {
            let m = t.mul(v[0], v[0])?;
            t.mean_all(m)
        }),
        case("mean_spatial", vec![randn(&[2, 3, 4, 5], 28)], |t, v| {
            let y = t.mean_spatial(v[0])?;
            project(t, y)
        }),
        case("std_spatial", vec![randn(&[2, 3, 2, 3], 29)], |t, v| {
            let y = t.std_spatial(v[0])?;
            project(t, y)
        }),
        case("mean_freq", vec![randn(&[2, 3, 4, 5], 30)], |t, v| {
            let y = t.mean_freq(v[0])?;
            project(t, y)
        }),
        case("linear", vec![randn(&[3, 4], 31), randn(&[5, 4], 32), randn(&[5], 33)], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y)
        }),
        case("softmax_rows", vec![randn(&[3, 5], 34)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            project(t, y)
        }),
        case("weighted_time_sum", vec![randn(&[2, 3, 6], 35), randn(&[2, 6], 36)], |t, v| {
            let y = t.weighted_time_sum(v[0], v[1])?;
            project(t, y)
        }),
        case("l2_normalize_rows", vec![randn(&[3, 4], 37)], |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            project(t, y)
        }),
        case("lde", vec![randn(&[2, 3, 5], 38), randn(&[4, 3], 39), positive(&[4], 40)], |t, v| {
            let y = t.lde(v[0], v[1], v[2])?;
            project(t, y)
        }),
        case("softmax_cross_entropy", vec![randn(&[3, 4], 41)], |t, v| t.softmax_cross_entropy(v[0], &[1, 0, 3])),
        case("angular margin m=1", vec![randn(&[3, 4], 42), randn(&[5, 4], 43)], |t, v| margin(t, v, 1)),
        case("angular margin m=2", vec![randn(&[3, 4], 44), randn(&[5, 4], 45)], |t, v| margin(t, v, 2)),
        case("angular margin m=3", vec![randn(&[3, 4], 46), randn(&[5, 4], 47)], |t, v| margin(t, v, 3)),
        case("angular margin m=4", vec![randn(&[3, 4], 48), randn(&[5, 4], 49)], |t, v| margin(t, v, 4)),
        case("ring_loss", vec![randn(&[3, 4], 50), positive(&[1], 51)], |t, v| t.ring_loss(v[0], v[1], 0.01)),
    ]
}

fn margin(t: &mut Tape, v: &[Var], m: u32) -> Result<Var> {
    let w = t.l2_normalize_rows(v[1])?;
    let y = t.angular_margin_logits(v[0], w, &[4, 0, 2], m, 0.5)?;
    project(t, y)
}

pub fn check_op(case: &OpCase) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = case.inputs.iter().enumerate().map(|(i, x)| store.add(format!("in{i}"), x.clone(), false)).collect();
    grad_check_params(
        &mut store,
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param_leaf(id, store.value(id).clone())).collect();
            (case.f)(tape, &vars)
        },
        &GradCheckOptions::default(),
    )
}

pub const SYSTEMS: [(AggregationMode, FpmVariant); 7] = [
    (AggregationMode::Single, FpmVariant::None),
    (AggregationMode::Msfa, FpmVariant::None),
    (AggregationMode::Msfa, FpmVariant::Bilinear),
    (AggregationMode::Msfa, FpmVariant::Transposed),
    (AggregationMode::Msea, FpmVariant::None),
    (AggregationMode::Msea, FpmVariant::Bilinear),
    (AggregationMode::Msea, FpmVariant::Transposed),
];

pub const POOLINGS: [PoolingKind; 4] = [PoolingKind::Gap, PoolingKind::Stats, PoolingKind::Sap, PoolingKind::Lde];

pub const LOSSES: [LossKind; 2] = [LossKind::Softmax, LossKind::ASoftmaxRing];

/// Gradient check of the full training loss of a narrow model on 10 frames.
pub fn check_model(mode: AggregationMode, fpm: FpmVariant, pooling: PoolingKind, loss: LossKind) -> Result<GradReport> {
    let cfg = narrow(mode, fpm, pooling);
    let loss_cfg = LossConfig { kind: loss, ..LossConfig::default() };
    let model = SpeakerModel::new(&cfg, &loss_cfg)?;
    let mut store = model.store.clone();
    let x = randn(&[2, 1, 16, 10], 77);
    let opts = GradCheckOptions { max_coords: Some(4), ..GradCheckOptions::default() };
    grad_check_params(
        &mut store,
        |tape, store| {
            let mut ctx = Ctx::new(tape, store, Mode::Eval);
            let xv = ctx.tape.leaf(x.clone(), false);
            let (out, _) = model.loss(&mut ctx, xv, &[0, 2], 100_000)?;
            Ok(out.loss)
        },
        &opts,
    )
}
