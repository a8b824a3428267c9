use isdet_core::attention::{self, PatchGrid};
use isdet_core::head::{DetectHead, HeadConfig, HeadVariant};
use isdet_core::isb::{Bottleneck, IsbBranch, IsbConfig, Stage};
use isdet_core::layers::{load_params, named_params, Mode, Params};
use isdet_core::profiler::{compare, count_flops, FlopConvention, InputShape, ModuleDesc};
use isdet_core::tensor::{gradcheck, GradReport, GradcheckOptions};
use isdet_core::toytrain::{gen_synthetic, train, ToyDataConfig, ToyModel, ToyModelConfig, TrainConfig};
use isdet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CommandName, ModuleKind, RunConfig, ToyModelKind};
use crate::error::{Classify, CliError};
use crate::report::{Report, Row};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cfg: &RunConfig) -> Result<Report> {
    match cfg.command {
        CommandName::Shapes => shapes(cfg),
        CommandName::Gradcheck => grad_check(cfg),
        CommandName::Profile => profile(cfg),
        CommandName::Compare => compare_variants(cfg),
        CommandName::Sweep => sweep(cfg),
        CommandName::TrainToy => train_toy(cfg),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("positive shape")
}

/// Scalar that depends on every element of `y` through fixed random weights.
fn weighted_sum(y: &Tensor, seed: u64) -> isdet_core::Result<Tensor> {
    Ok(y.mul(&random(y.shape(), &mut rng(seed)))?.sum())
}

fn isb_config(cfg: &RunConfig) -> Result<IsbConfig> {
    IsbConfig::new(cfg.channels, cfg.ratio, cfg.patch).usage()
}

fn head_config(cfg: &RunConfig) -> Result<HeadConfig> {
    let strides = (0..cfg.levels.len()).map(|i| 8 << i).collect();
    HeadConfig::yolov8(cfg.levels.clone(), cfg.nc, cfg.reg_max, strides).usage()
}

/// Attention width for a reconstructor input of `channels` channels.
fn attention_width(cfg: &RunConfig) -> Result<usize> {
    if cfg.channels == 0 || !cfg.channels.is_multiple_of(3) {
        return Err(CliError::Usage(format!(
            "attention input channels must be a positive multiple of 3 (Q, K, V), got {}",
            cfg.channels
        )));
    }
    PatchGrid::new(cfg.height, cfg.width, cfg.patch).usage()?;
    Ok(cfg.channels / 3)
}

fn describe(cfg: &RunConfig) -> Result<ModuleDesc> {
    Ok(match cfg.module {
        ModuleKind::Attention => ModuleDesc::Attention {
            k: cfg.patch,
            c2: attention_width(cfg)?,
        },
        ModuleKind::Isb => ModuleDesc::IsbBranch { cfg: isb_config(cfg)? },
        ModuleKind::Bottleneck => ModuleDesc::Bottleneck {
            c: cfg.channels,
            shortcut: true,
            isb: Some(isb_config(cfg)?),
        },
        ModuleKind::Head => ModuleDesc::Head {
            cfg: head_config(cfg)?,
            variant: HeadVariant::Baseline,
        },
        ModuleKind::Isadh => ModuleDesc::Head {
            cfg: head_config(cfg)?,
            variant: HeadVariant::Isadh,
        },
    })
}

fn input_shape(cfg: &RunConfig) -> InputShape {
    InputShape::new(cfg.height, cfg.width)
}

// ---------------------------------------------------------------------------
// shapes

fn stage(name: &str, t: &Tensor) -> Row {
    Row::Stage {
        stage: name.into(),
        shape: t.shape().to_vec(),
    }
}

fn stage_rows(prefix: &str, stages: Vec<Stage>) -> impl Iterator<Item = Row> + '_ {
    stages.into_iter().map(move |s| Row::Stage {
        stage: format!("{prefix}{}", s.stage),
        shape: s.shape,
    })
}

fn shapes(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new(cfg);
    let mut r = rng(cfg.seed);
    let rows = &mut report.rows;
    match cfg.module {
        ModuleKind::Attention => {
            attention_width(cfg)?;
            let x = random(&[1, cfg.channels, cfg.height, cfg.width], &mut r);
            let rec = attention::reconstruct_stages(&x, cfg.patch).failure()?;
            let (q, k, v) = attention::split_qkv(&rec.output).failure()?;
            let f = attention::fcgsa(&q, &k, &v).failure()?;
            let y = attention::reassemble(&f, cfg.patch, cfg.height, cfg.width).failure()?;
            for (name, t) in [
                ("input", &x),
                ("unfold", &rec.unfolded),
                ("reshape", &rec.split),
                ("reconstruct", &rec.output),
                ("q", &q),
                ("k", &k),
                ("v", &v),
                ("attention", &f),
                ("reassemble", &y),
            ] {
                rows.push(stage(name, t));
            }
        }
        ModuleKind::Isb => {
            let branch = IsbBranch::new(isb_config(cfg)?, &mut r);
            let x = random(&[1, cfg.channels, cfg.height, cfg.width], &mut r);
            let (_, stages) = branch.trace(&x).failure()?;
            rows.extend(stage_rows("", stages));
        }
        ModuleKind::Bottleneck => {
            let mut block = Bottleneck::with_isb(isb_config(cfg)?, true, &mut r);
            block.set_mode(Mode::Eval);
            let x = random(&[1, cfg.channels, cfg.height, cfg.width], &mut r);
            let a = block.cv1.forward(&x).failure()?;
            let b = block.cv2.forward(&a).failure()?;
            let main = x.add(&b).failure()?;
            let (branch, stages) = block.isb.as_ref().expect("built with a branch").trace(&x).failure()?;
            rows.extend([
                stage("input", &x),
                stage("cv1", &a),
                stage("cv2", &b),
                stage("shortcut", &main),
            ]);
            rows.extend(stage_rows("isb.", stages));
            rows.push(stage("output", &main.add(&branch).failure()?));
        }
        ModuleKind::Head | ModuleKind::Isadh => {
            let variant = if cfg.module == ModuleKind::Head {
                HeadVariant::Baseline
            } else {
                HeadVariant::Isadh
            };
            let hc = head_config(cfg)?;
            let mut head = DetectHead::new(hc.clone(), variant, &mut r).usage()?;
            head.set_mode(Mode::Eval);
            for (i, (level, (&c, &s))) in head
                .levels
                .iter()
                .zip(hc.level_channels.iter().zip(&hc.strides))
                .enumerate()
            {
                if !cfg.height.is_multiple_of(s) || !cfg.width.is_multiple_of(s) {
                    return Err(CliError::Usage(format!(
                        "{}×{} is not divisible by level stride {s}",
                        cfg.height, cfg.width
                    )));
                }
                let x = random(&[1, c, cfg.height / s, cfg.width / s], &mut r);
                let p = format!("level{i}");
                rows.push(stage(&format!("{p}.input"), &x));
                for (branch, convs, instance, pred) in [
                    ("cls", &level.cls, &level.cls_instance, &level.cls_pred),
                    ("box", &level.boxes, &level.box_instance, &level.box_pred),
                ] {
                    let a = convs[0].forward(&x).failure()?;
                    let mut b = convs[1].forward(&a).failure()?;
                    rows.push(stage(&format!("{p}.{branch}.0"), &a));
                    rows.push(stage(&format!("{p}.{branch}.1"), &b));
                    if let Some(path) = instance {
                        let extra = path.forward(&x).failure()?;
                        rows.push(stage(&format!("{p}.{branch}.instance"), &extra));
                        b = b.add(&extra).failure()?;
                    }
                    rows.push(stage(&format!("{p}.{branch}.pred"), &pred.forward(&b).failure()?));
                }
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck

/// Gradient check over the given inputs plus every parameter of `module`.
fn check_module<M, F>(
    module: &M,
    inputs: Vec<(String, Tensor)>,
    loss: F,
) -> isdet_core::Result<(Vec<String>, GradReport)>
where
    M: Params + Clone,
    F: Fn(&M, &[Tensor]) -> isdet_core::Result<Tensor>,
{
    let n = inputs.len();
    let (mut names, mut tensors): (Vec<String>, Vec<Tensor>) = inputs.into_iter().unzip();
    for (name, p) in named_params(module) {
        names.push(name);
        tensors.push(p);
    }
    let report = gradcheck(
        |ts| {
            let mut m = module.clone();
            load_params(&mut m, &ts[n..])?;
            loss(&m, &ts[..n])
        },
        &tensors,
        GradcheckOptions::default(),
    )?;
    Ok((names, report))
}

fn push_grad_rows(report: &mut Report, names: &[String], g: &GradReport) {
    for (name, p) in names.iter().zip(&g.params) {
        report.rows.push(Row::Grad {
            name: name.clone(),
            max_rel: p.max_rel,
            max_abs: p.max_abs,
            pass: p.pass,
        });
    }
    report.pass &= g.pass;
}

fn grad_check(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new(cfg);
    let mut r = rng(cfg.seed);
    let seed = cfg.seed;
    let map = |name: &str, r: &mut ChaCha8Rng| (name.to_string(), random(&[1, cfg.channels, cfg.height, cfg.width], r));
    let (names, g) = match cfg.module {
        ModuleKind::Attention => {
            let c2 = attention_width(cfg)?;
            let (k, h, w) = (cfg.patch, cfg.height, cfg.width);
            let pipeline = |t: &[Tensor]| {
                let (q, kk, v) = attention::split_qkv(&attention::reconstruct(&t[0], k)?)?;
                weighted_sum(&attention::reassemble(&attention::fcgsa(&q, &kk, &v)?, k, h, w)?, seed)
            };
            let x = map("pipeline.input", &mut r);
            let g = gradcheck(pipeline, std::slice::from_ref(&x.1), GradcheckOptions::default()).failure()?;
            push_grad_rows(&mut report, &[x.0], &g);

            let grid = PatchGrid::new(h, w, k).usage()?;
            let shape = [1, grid.k2(), c2, grid.l()];
            let qkv: Vec<Tensor> = (0..3).map(|_| random(&shape, &mut r)).collect();
            let f = |t: &[Tensor]| weighted_sum(&attention::fcgsa(&t[0], &t[1], &t[2])?, seed);
            let names = ["fcgsa.q", "fcgsa.k", "fcgsa.v"].map(String::from).to_vec();
            report.total("fcgsa_operand", format!("{shape:?}"));
            (names, gradcheck(f, &qkv, GradcheckOptions::default()).failure()?)
        }
        ModuleKind::Isb => {
            let branch = IsbBranch::new(isb_config(cfg)?, &mut r);
            let x = map("input", &mut r);
            check_module(&branch, vec![x], |m, t| weighted_sum(&m.forward(&t[0])?, seed)).failure()?
        }
        ModuleKind::Bottleneck => {
            let block = Bottleneck::with_isb(isb_config(cfg)?, true, &mut r);
            let x = map("input", &mut r);
            check_module(&block, vec![x], |m, t| weighted_sum(&m.forward(&t[0])?, seed)).failure()?
        }
        ModuleKind::Head | ModuleKind::Isadh => {
            let variant = if cfg.module == ModuleKind::Head {
                HeadVariant::Baseline
            } else {
                HeadVariant::Isadh
            };
            let width = cfg.levels[0];
            let hc = HeadConfig {
                level_channels: cfg.levels.clone(),
                nc: cfg.nc,
                reg_max: cfg.reg_max,
                c2: width,
                c3: width,
                strides: vec![1; cfg.levels.len()],
            };
            let head = DetectHead::new(hc, variant, &mut r).usage()?;
            let features: Vec<(String, Tensor)> = cfg
                .levels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    (
                        format!("level{i}.input"),
                        random(&[1, c, cfg.height, cfg.width], &mut r),
                    )
                })
                .collect();
            check_module(&head, features, |m, t| {
                let out = m.forward(t)?;
                let mut total = Tensor::scalar(0.0);
                for (i, l) in out.levels.iter().enumerate() {
                    let s = seed + 2 * i as u64;
                    total = total
                        .add(&weighted_sum(&l.cls, s)?)?
                        .add(&weighted_sum(&l.boxes, s + 1)?)?;
                }
                Ok(total)
            })
            .failure()?
        }
    };
    push_grad_rows(&mut report, &names, &g);
    let (worst_rel, worst_abs) = report.rows.iter().fold((0.0f64, 0.0f64), |(a, b), row| match row {
        Row::Grad { max_rel, max_abs, .. } => (a.max(*max_rel), b.max(*max_abs)),
        _ => (a, b),
    });
    report.total("tolerance", g.tol);
    report.total("max_rel", worst_rel);
    report.total("max_abs", worst_abs);
    report.total("pass", report.pass);
    Ok(report)
}

// ---------------------------------------------------------------------------
// profile, compare, sweep

fn profile(cfg: &RunConfig) -> Result<Report> {
    let conv = FlopConvention::default();
    let cost = count_flops(&describe(cfg)?, input_shape(cfg), &conv).usage()?;
    let mut report = Report::new(cfg);
    report.rows = cost
        .rows
        .iter()
        .map(|r| Row::Cost {
            name: r.name.clone(),
            params: r.params as i64,
            flops: r.flops as i64,
        })
        .collect();
    report.total("params", cost.total_params);
    report.total("flops", cost.total_flops);
    report.total("gflops", cost.total_flops as f64 / 1e9);
    report.convention = Some(conv);
    Ok(report)
}

/// The module without its instance-specific parts, then the module with them.
fn variant_pair(cfg: &RunConfig) -> Result<(ModuleDesc, ModuleDesc)> {
    match cfg.module {
        ModuleKind::Isb | ModuleKind::Bottleneck => {
            let isb = isb_config(cfg)?;
            let block = |isb| ModuleDesc::Bottleneck {
                c: cfg.channels,
                shortcut: true,
                isb,
            };
            Ok((block(None), block(Some(isb))))
        }
        ModuleKind::Head | ModuleKind::Isadh => {
            let hc = head_config(cfg)?;
            let head = |variant| ModuleDesc::Head {
                cfg: hc.clone(),
                variant,
            };
            Ok((head(HeadVariant::Baseline), head(HeadVariant::Isadh)))
        }
        ModuleKind::Attention => Err(CliError::Usage(
            "compare needs a module with a baseline form (isb, bottleneck, head, isadh)".into(),
        )),
    }
}

fn compare_variants(cfg: &RunConfig) -> Result<Report> {
    let conv = FlopConvention::default();
    let (a, b) = variant_pair(cfg)?;
    let delta = compare(&a, &b, input_shape(cfg), &conv).usage()?;
    let mut report = Report::new(cfg);
    report.rows = delta
        .rows
        .iter()
        .map(|r| Row::Cost {
            name: r.name.clone(),
            params: r.d_params,
            flops: r.d_flops,
        })
        .collect();
    report.total("params_baseline", delta.a.total_params);
    report.total("params_variant", delta.b.total_params);
    report.total("flops_baseline", delta.a.total_flops);
    report.total("flops_variant", delta.b.total_flops);
    report.total("d_params", delta.d_params);
    report.total("d_flops", delta.d_flops);
    report.total("d_params_millions", delta.d_params as f64 / 1e6);
    report.total("d_gflops", delta.d_flops as f64 / 1e9);
    report.convention = Some(conv);
    Ok(report)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn sweep(cfg: &RunConfig) -> Result<Report> {
    if cfg.from == 0 || cfg.to < 2 * cfg.from {
        return Err(CliError::Usage(format!(
            "sweep needs 0 < from and to ≥ 2·from, got {} and {}",
            cfg.from, cfg.to
        )));
    }
    let conv = FlopConvention::default();
    let desc = describe(&RunConfig {
        height: cfg.from,
        width: cfg.from,
        ..cfg.clone()
    })?;
    let mut report = Report::new(cfg);
    let mut points = Vec::new();
    let mut side = cfg.from;
    while side <= cfg.to {
        let cost = count_flops(&desc, InputShape::new(side, side), &conv).usage()?;
        let pixels = (side * side) as u64;
        report.rows.push(Row::Scale {
            name: format!("{side}x{side}"),
            pixels,
            params: cost.total_params as i64,
            flops: cost.total_flops as i64,
        });
        points.push((pixels as f64, cost.total_flops as f64));
        side *= 2;
    }
    let first = points[0].0;
    let last = points.last().expect("at least two rungs").0;
    report.total("rungs", points.len());
    report.total("pixel_range", last / first);
    report.total("exponent", log_log_slope(&points));
    report.convention = Some(conv);
    Ok(report)
}

// ---------------------------------------------------------------------------
// train-toy

fn train_toy(cfg: &RunConfig) -> Result<Report> {
    let data_cfg = ToyDataConfig {
        samples: cfg.samples,
        height: cfg.height,
        width: cfg.width,
        seed: cfg.seed,
        ..ToyDataConfig::default()
    };
    let data = gen_synthetic(&data_cfg).usage()?;
    let classes = data_cfg.classes;
    let models: Vec<(&str, ToyModelConfig)> = match cfg.model {
        ToyModelKind::Baseline => vec![("baseline", ToyModelConfig::baseline(classes))],
        ToyModelKind::InstanceSpecific => vec![("isb+isadh", ToyModelConfig::instance_specific(classes))],
        ToyModelKind::Both => vec![
            ("baseline", ToyModelConfig::baseline(classes)),
            ("isb+isadh", ToyModelConfig::instance_specific(classes)),
        ],
    };
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut report = Report::new(cfg);
    for (name, model_cfg) in models {
        let mut model = ToyModel::new(model_cfg, cfg.seed).usage()?;
        let log = train(&mut model, &data, &train_cfg).map_err(|e| match e {
            isdet_core::Error::Config(m) => CliError::Usage(m),
            other => CliError::Failure(format!("{name}: {other}")),
        })?;
        for (step, &loss) in log.losses.iter().enumerate() {
            report.rows.push(Row::Loss {
                model: name.into(),
                step,
                loss,
            });
        }
        let (first, last) = (log.losses[0], *log.losses.last().expect("at least one step"));
        report.total(&format!("{name}.initial_loss"), first);
        report.total(&format!("{name}.final_loss"), last);
        report.total(&format!("{name}.ratio"), last / first);
    }
    Ok(report)
}
