//! Network construction and forward graphs for every fusion variant.
//!
//! A [`FusionNetwork`] owns its parameters and batchnorm buffers; each
//! forward pass binds them onto a fresh tape and assembles the variant's
//! graph. Spatial extents are never baked into the parameters (all heads sit
//! behind global average pooling), so the same network runs on full 32x32
//! patches or on small probe inputs.

use super::{ModelSpec, DEFAULT_ALPHA, FEATURE_CHANNELS, FUSION_CHANNELS, HEAD_WIDTH};
use crate::data::{
    expand_for_scales, normalize_patch, BandGroupMap, BandStat, PatchPair, MSI_BANDS, SAR_BANDS,
};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::scalespace::multi_scale_stack;
use crate::tensor::{
    adam_step, multi_head_attention, AdamConfig, AttentionNodes, BnState, NodeId, Padding,
    Parameter, RunMode, Tape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Debug, Clone)]
struct GroupConv {
    indices: Vec<usize>,
    w: ParamId,
    b: ParamId,
}

/// First stage of a branch: either one conv block, or per-group conv blocks
/// whose concatenated features optionally pass through a unifying conv.
#[derive(Debug, Clone)]
struct ConvStage {
    grouped: Option<Vec<GroupConv>>,
    conv: Option<(ParamId, ParamId)>,
    bn: Option<BnIds>,
    dropout: bool,
}

#[derive(Debug, Clone, Copy)]
struct MhaIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    heads: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct AttnTopo {
    self_sar: MhaIds,
    self_msi: MhaIds,
    cross_sar: MhaIds,
    cross_msi: MhaIds,
}

#[derive(Debug, Clone)]
struct FeatureTopo {
    sar: ConvStage,
    msi: ConvStage,
    attn: Option<AttnTopo>,
    fus_conv: (ParamId, ParamId),
    fus_bn: BnIds,
}

#[derive(Debug, Clone)]
struct UnetIds {
    enc1: (ParamId, ParamId),
    enc2: (ParamId, ParamId),
    bott: (ParamId, ParamId),
    dec2: (ParamId, ParamId),
    dec1: (ParamId, ParamId),
    head: HeadIds,
}

#[derive(Debug, Clone)]
struct CnnIds {
    c1: (ParamId, ParamId),
    c2: (ParamId, ParamId),
    head: HeadIds,
}

#[derive(Debug, Clone)]
enum Topology {
    Hybrid {
        pixel: Option<ConvStage>,
        feature: Option<FeatureTopo>,
        head: HeadIds,
    },
    Late {
        sar_front: Option<Vec<GroupConv>>,
        unet: UnetIds,
        msi_front: Option<Vec<GroupConv>>,
        cnn: CnnIds,
    },
}

pub struct FusionNetwork<F: Element = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    params: Vec<Parameter<F>>,
    names: Vec<String>,
    bn: Vec<BnState<F>>,
    bn_names: Vec<String>,
    topo: Topology,
}

/// Registry that hands out parameter ids during construction; creation order
/// fixes both the checkpoint layout and the RNG draw sequence.
struct Registry<'a, F: Element> {
    params: &'a mut Vec<Parameter<F>>,
    names: &'a mut Vec<String>,
    bn: &'a mut Vec<BnState<F>>,
    bn_names: &'a mut Vec<String>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Element> Registry<'a, F> {
    fn add(&mut self, name: String, p: Parameter<F>) -> ParamId {
        self.params.push(p);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> (ParamId, ParamId) {
        let w = Parameter::kaiming(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        let w = self.add(format!("{name}.w"), w);
        let b = self.add(format!("{name}.b"), Parameter::zeros(&[c_out]));
        (w, b)
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
        let w = Parameter::kaiming(&[d_in, d_out], d_in, self.rng);
        let w = self.add(format!("{name}.w"), w);
        let b = self.add(format!("{name}.b"), Parameter::zeros(&[d_out]));
        (w, b)
    }

    fn batchnorm(&mut self, name: &str, channels: usize) -> BnIds {
        let gamma = self.add(format!("{name}.gamma"), Parameter::ones(&[channels]));
        let beta = self.add(format!("{name}.beta"), Parameter::zeros(&[channels]));
        self.bn.push(BnState::new(channels));
        self.bn_names.push(name.to_string());
        BnIds {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    fn mha(&mut self, name: &str, embed: usize, heads: usize) -> MhaIds {
        let mut proj = |suffix: &str| {
            let w = Parameter::kaiming(&[embed, embed], embed, self.rng);
            let w_id = self.add(format!("{name}.w{suffix}"), w);
            let b_id = self.add(format!("{name}.b{suffix}"), Parameter::zeros(&[embed]));
            (w_id, b_id)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        MhaIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
        }
    }

    /// Per-group 3x3 conv blocks over the given channel partition.
    fn group_convs(&mut self, name: &str, groups: &[(String, Vec<usize>)]) -> Vec<GroupConv> {
        groups
            .iter()
            .map(|(gname, indices)| {
                let (w, b) = self.conv(&format!("{name}.{gname}"), indices.len(), FEATURE_CHANNELS, 3);
                GroupConv {
                    indices: indices.clone(),
                    w,
                    b,
                }
            })
            .collect()
    }
}

/// Scale-expanded grouping maps for one spec. With scales, each group picks
/// its member bands at every scale of the stack.
fn grouping_for(spec: &ModelSpec) -> (Vec<(String, Vec<usize>)>, Vec<(String, Vec<usize>)>) {
    let map = BandGroupMap::default_grouping();
    let scales = spec.num_scales();
    let expand = |groups: &[(String, Vec<usize>)], bands: usize| {
        groups
            .iter()
            .map(|(n, idxs)| (n.clone(), expand_for_scales(idxs, bands, scales)))
            .collect::<Vec<_>>()
    };
    (
        expand(&map.sar_groups, SAR_BANDS),
        expand(&map.msi_groups, MSI_BANDS),
    )
}

impl<F: Element> FusionNetwork<F> {
    /// Instantiate a parameterized network for the spec; weight init is a
    /// pure function of `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut bn = Vec::new();
        let mut bn_names = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registry {
            params: &mut params,
            names: &mut names,
            bn: &mut bn,
            bn_names: &mut bn_names,
            rng: &mut rng,
        };

        let scales = spec.num_scales();
        let sar_ch = SAR_BANDS * scales;
        let msi_ch = MSI_BANDS * scales;
        let (sar_groups, msi_groups) = grouping_for(&spec);

        let topo = if spec.variant.is_late_fusion() {
            let (sar_front, enc1_in) = if spec.band_grouping {
                let convs = reg.group_convs("unet.groups", &sar_groups);
                let ch = convs.len() * FEATURE_CHANNELS;
                (Some(convs), ch)
            } else {
                (None, sar_ch)
            };
            let unet = UnetIds {
                enc1: reg.conv("unet.enc1", enc1_in, 32, 3),
                enc2: reg.conv("unet.enc2", 32, 64, 3),
                bott: reg.conv("unet.bottleneck", 64, 128, 3),
                dec2: reg.conv("unet.dec2", 128 + 64, 64, 3),
                dec1: reg.conv("unet.dec1", 64 + 32, 32, 3),
                head: {
                    let (w1, b1) = reg.dense("unet.head.fc1", 32, HEAD_WIDTH);
                    let (w2, b2) = reg.dense("unet.head.fc2", HEAD_WIDTH, spec.num_classes);
                    HeadIds { w1, b1, w2, b2 }
                },
            };
            let (msi_front, c1_in) = if spec.band_grouping {
                let convs = reg.group_convs("cnn.groups", &msi_groups);
                let ch = convs.len() * FEATURE_CHANNELS;
                (Some(convs), ch)
            } else {
                (None, msi_ch)
            };
            let cnn = CnnIds {
                c1: reg.conv("cnn.conv1", c1_in, 32, 3),
                c2: reg.conv("cnn.conv2", 32, 64, 3),
                head: {
                    let (w1, b1) = reg.dense("cnn.head.fc1", 64, HEAD_WIDTH);
                    let (w2, b2) = reg.dense("cnn.head.fc2", HEAD_WIDTH, spec.num_classes);
                    HeadIds { w1, b1, w2, b2 }
                },
            };
            Topology::Late {
                sar_front,
                unet,
                msi_front,
                cnn,
            }
        } else {
            // Pixel branch: one conv block over the channel-concatenated
            // input; with grouping, per-group blocks concatenated before the
            // shared batchnorm.
            let mut pixel_out = 0;
            let pixel = if spec.variant.has_pixel_branch() {
                let stage = if spec.band_grouping {
                    let mut groups = sar_groups.clone();
                    for (name, idxs) in &msi_groups {
                        groups.push((
                            name.clone(),
                            idxs.iter().map(|&i| i + sar_ch).collect(),
                        ));
                    }
                    let convs = reg.group_convs("pixel.groups", &groups);
                    let ch = convs.len() * FEATURE_CHANNELS;
                    pixel_out = ch;
                    ConvStage {
                        grouped: Some(convs),
                        conv: None,
                        bn: Some(reg.batchnorm("pixel.bn", ch)),
                        dropout: true,
                    }
                } else {
                    pixel_out = FEATURE_CHANNELS;
                    ConvStage {
                        grouped: None,
                        conv: Some(reg.conv("pixel.conv", sar_ch + msi_ch, FEATURE_CHANNELS, 3)),
                        bn: Some(reg.batchnorm("pixel.bn", FEATURE_CHANNELS)),
                        dropout: true,
                    }
                };
                Some(stage)
            } else {
                None
            };

            // Feature path: modality stages must end at FEATURE_CHANNELS so
            // the element-wise fusion lines up; grouped stages therefore add
            // a unifying conv after the concatenated group features.
            let feature = if spec.variant.has_feature_branch() {
                let stage = |reg: &mut Registry<F>,
                             name: &str,
                             in_ch: usize,
                             groups: &[(String, Vec<usize>)]|
                 -> ConvStage {
                    if spec.band_grouping {
                        let convs = reg.group_convs(&format!("{name}.groups"), groups);
                        let concat_ch = convs.len() * FEATURE_CHANNELS;
                        ConvStage {
                            grouped: Some(convs),
                            conv: Some(reg.conv(
                                &format!("{name}.unify"),
                                concat_ch,
                                FEATURE_CHANNELS,
                                3,
                            )),
                            bn: Some(reg.batchnorm(&format!("{name}.bn"), FEATURE_CHANNELS)),
                            dropout: true,
                        }
                    } else {
                        ConvStage {
                            grouped: None,
                            conv: Some(reg.conv(&format!("{name}.conv"), in_ch, FEATURE_CHANNELS, 3)),
                            bn: Some(reg.batchnorm(&format!("{name}.bn"), FEATURE_CHANNELS)),
                            dropout: true,
                        }
                    }
                };
                let sar = stage(&mut reg, "feature.sar", sar_ch, &sar_groups);
                let msi = stage(&mut reg, "feature.msi", msi_ch, &msi_groups);
                let attn = if spec.variant.has_attention() {
                    let heads = spec.attention_heads.expect("validated");
                    Some(AttnTopo {
                        self_sar: reg.mha("attn.self_sar", FEATURE_CHANNELS, heads),
                        self_msi: reg.mha("attn.self_msi", FEATURE_CHANNELS, heads),
                        cross_sar: reg.mha("attn.cross_sar", FEATURE_CHANNELS, heads),
                        cross_msi: reg.mha("attn.cross_msi", FEATURE_CHANNELS, heads),
                    })
                } else {
                    None
                };
                Some(FeatureTopo {
                    sar,
                    msi,
                    attn,
                    fus_conv: reg.conv("fusion.conv", FEATURE_CHANNELS, FUSION_CHANNELS, 3),
                    fus_bn: reg.batchnorm("fusion.bn", FUSION_CHANNELS),
                })
            } else {
                None
            };

            let head_in = pixel_out + if feature.is_some() { FUSION_CHANNELS } else { 0 };
            let (w1, b1) = reg.dense("head.fc1", head_in, HEAD_WIDTH);
            let (w2, b2) = reg.dense("head.fc2", HEAD_WIDTH, spec.num_classes);
            Topology::Hybrid {
                pixel,
                feature,
                head: HeadIds { w1, b1, w2, b2 },
            }
        };

        Ok(FusionNetwork {
            spec,
            seed,
            params,
            names,
            bn,
            bn_names,
            topo,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<F>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<F>] {
        &mut self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Fingerprint of all learnable state, for mutation checks.
    pub fn state_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for p in &self.params {
            for &v in &p.tensor.data {
                mix(v.to_f64().to_bits());
            }
        }
        for s in &self.bn {
            for &v in s.running_mean.iter().chain(&s.running_var) {
                mix(v.to_f64().to_bits());
            }
        }
        h
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !self.spec.variant.is_late_fusion() {
            return Err(Error::Config(format!(
                "alpha only applies to fm4, not {}",
                self.spec.variant
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {alpha}")));
        }
        self.spec.alpha = Some(alpha);
        Ok(())
    }

    /// Build the variant's graph on `tape` from already-prepared input nodes.
    /// Returns the output node plus the parameter binding map used to pull
    /// gradients back out.
    pub fn forward_graph(
        &mut self,
        tape: &mut Tape<F>,
        sar: NodeId,
        msi: NodeId,
        mode: RunMode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<GraphRun> {
        let mut bound = vec![None; self.params.len()];
        let mut cx = Cx {
            params: &self.params,
            bn: &mut self.bn,
            bound: &mut bound,
            tape,
            mode,
            rng: dropout_rng,
        };
        let out = match &self.topo {
            Topology::Hybrid {
                pixel,
                feature,
                head,
            } => {
                let mut vecs = Vec::new();
                if let Some(stage) = pixel {
                    let stacked = cx.tape.concat(&[sar, msi], 1)?;
                    let x = cx.conv_stage(stage, stacked)?;
                    vecs.push(cx.tape.global_avg_pool(x)?);
                }
                if let Some(ft) = feature {
                    let mut s = cx.conv_stage(&ft.sar, sar)?;
                    let mut m = cx.conv_stage(&ft.msi, msi)?;
                    if let Some(attn) = &ft.attn {
                        s = cx.tape.maxpool2d(s, 2)?;
                        m = cx.tape.maxpool2d(m, 2)?;
                        let (ss, sm) = (cx.to_seq(s)?, cx.to_seq(m)?);
                        let s_self = cx.mha(&attn.self_sar, ss, ss)?;
                        let m_self = cx.mha(&attn.self_msi, sm, sm)?;
                        let s_cross = cx.mha(&attn.cross_sar, s_self, m_self)?;
                        let m_cross = cx.mha(&attn.cross_msi, m_self, s_self)?;
                        s = cx.from_seq(s_cross, cx.tape.value(s).shape.clone())?;
                        m = cx.from_seq(m_cross, cx.tape.value(m).shape.clone())?;
                    }
                    let fused = cx.tape.eltwise_mul(s, m)?;
                    let (w, b) = ft.fus_conv;
                    let (wn, bn_node) = (cx.bind(w), cx.bind(b));
                    let x = cx.tape.conv2d(fused, wn, bn_node, Padding::Same)?;
                    let x = cx.tape.maxpool2d(x, 2)?;
                    let x = cx.apply_bn(&ft.fus_bn, x)?;
                    let x = cx.tape.relu(x);
                    vecs.push(cx.tape.global_avg_pool(x)?);
                }
                let joined = if vecs.len() == 1 {
                    vecs[0]
                } else {
                    cx.tape.concat(&vecs, 1)?
                };
                let probs = cx.head(head, joined)?;
                ForwardOutput {
                    probs,
                    branches: None,
                }
            }
            Topology::Late {
                sar_front,
                unet,
                msi_front,
                cnn,
            } => {
                let x = match sar_front {
                    Some(groups) => cx.grouped_front(groups, sar)?,
                    None => sar,
                };
                let p_unet = cx.unet(unet, x)?;
                let y = match msi_front {
                    Some(groups) => cx.grouped_front(groups, msi)?,
                    None => msi,
                };
                let p_cnn = cx.cnn(cnn, y)?;
                let alpha = F::from_f64(self.spec.alpha.unwrap_or(DEFAULT_ALPHA));
                let a_part = cx.tape.scale(p_unet, alpha);
                let b_part = cx.tape.scale(p_cnn, F::one() - alpha);
                let probs = cx.tape.add(a_part, b_part)?;
                ForwardOutput {
                    probs,
                    branches: Some((p_unet, p_cnn)),
                }
            }
        };
        Ok(GraphRun { out, bound })
    }

    /// Copy gradients of every bound parameter out of the tape.
    pub fn pull_grads(&mut self, tape: &Tape<F>, run: &GraphRun) -> Result<()> {
        for (param, node) in self.params.iter_mut().zip(&run.bound) {
            if let Some(id) = node {
                let g = tape.grad(*id).ok_or_else(|| {
                    Error::State("pull_grads called before backward".into())
                })?;
                param.tensor.grad = Some(g.to_vec());
            }
        }
        Ok(())
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let mut refs: Vec<&mut Parameter<F>> = self.params.iter_mut().collect();
        adam_step(&mut refs, cfg)
    }
}

pub struct ForwardOutput {
    pub probs: NodeId,
    /// FM4 only: (U-Net branch probabilities, CNN branch probabilities).
    pub branches: Option<(NodeId, NodeId)>,
}

pub struct GraphRun {
    pub out: ForwardOutput,
    pub bound: Vec<Option<NodeId>>,
}

/// Forward-pass context: binds parameters lazily and owns the mutable tape.
struct Cx<'a, F: Element> {
    params: &'a [Parameter<F>],
    bn: &'a mut [BnState<F>],
    bound: &'a mut Vec<Option<NodeId>>,
    tape: &'a mut Tape<F>,
    mode: RunMode,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Element> Cx<'a, F> {
    fn bind(&mut self, p: ParamId) -> NodeId {
        if let Some(id) = self.bound[p] {
            return id;
        }
        let mut t = self.params[p].tensor.clone();
        t.grad = None;
        let id = self.tape.leaf(t);
        self.bound[p] = Some(id);
        id
    }

    fn apply_bn(&mut self, ids: &BnIds, x: NodeId) -> Result<NodeId> {
        let gamma = self.bind(ids.gamma);
        let beta = self.bind(ids.beta);
        self.tape
            .batchnorm2d(x, gamma, beta, &mut self.bn[ids.state], self.mode.bn())
    }

    fn conv_block(&mut self, w: ParamId, b: ParamId, x: NodeId) -> Result<NodeId> {
        let (wn, bn) = (self.bind(w), self.bind(b));
        let c = self.tape.conv2d(x, wn, bn, Padding::Same)?;
        Ok(self.tape.relu(c))
    }

    fn grouped_front(&mut self, groups: &[GroupConv], x: NodeId) -> Result<NodeId> {
        let mut feats = Vec::with_capacity(groups.len());
        for g in groups {
            let sel = self.tape.select_channels(x, &g.indices)?;
            feats.push(self.conv_block(g.w, g.b, sel)?);
        }
        self.tape.concat(&feats, 1)
    }

    fn conv_stage(&mut self, stage: &ConvStage, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        if let Some(groups) = &stage.grouped {
            cur = self.grouped_front(groups, cur)?;
        }
        if let Some((w, b)) = stage.conv {
            cur = self.conv_block(w, b, cur)?;
        }
        if let Some(bn_ids) = &stage.bn {
            cur = self.apply_bn(bn_ids, cur)?;
        }
        if stage.dropout {
            if let RunMode::Train { dropout_rate } = self.mode {
                cur = self.tape.spatial_dropout(cur, dropout_rate, true, self.rng)?;
            }
        }
        Ok(cur)
    }

    /// [N,C,H,W] -> [N, H*W, C]
    fn to_seq(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.tape.value(x).dims4("to_seq")?;
        let flat = self.tape.reshape(x, &[n, c, h * w])?;
        self.tape.permute(flat, &[0, 2, 1])
    }

    fn from_seq(&mut self, x: NodeId, nchw: Vec<usize>) -> Result<NodeId> {
        let back = self.tape.permute(x, &[0, 2, 1])?;
        self.tape.reshape(back, &nchw)
    }

    fn mha(&mut self, ids: &MhaIds, q: NodeId, kv: NodeId) -> Result<NodeId> {
        let nodes = AttentionNodes {
            wq: self.bind(ids.wq),
            bq: self.bind(ids.bq),
            wk: self.bind(ids.wk),
            bk: self.bind(ids.bk),
            wv: self.bind(ids.wv),
            bv: self.bind(ids.bv),
            wo: self.bind(ids.wo),
            bo: self.bind(ids.bo),
            heads: ids.heads,
        };
        multi_head_attention(self.tape, q, kv, &nodes)
    }

    /// dense(64) -> ReLU -> dense(num_classes) -> softmax
    fn head(&mut self, head: &HeadIds, x: NodeId) -> Result<NodeId> {
        let (w1, b1) = (self.bind(head.w1), self.bind(head.b1));
        let h = self.tape.dense(x, w1, b1)?;
        let h = self.tape.relu(h);
        let (w2, b2) = (self.bind(head.w2), self.bind(head.b2));
        let logits = self.tape.dense(h, w2, b2)?;
        Ok(self.tape.softmax(logits))
    }

    /// Two encoder levels, bottleneck, two decoder levels with skip
    /// concatenation, classification head on the pooled decoder output.
    fn unet(&mut self, ids: &UnetIds, x: NodeId) -> Result<NodeId> {
        let e1 = self.conv_block(ids.enc1.0, ids.enc1.1, x)?;
        let p1 = self.tape.maxpool2d(e1, 2)?;
        let e2 = self.conv_block(ids.enc2.0, ids.enc2.1, p1)?;
        let p2 = self.tape.maxpool2d(e2, 2)?;
        let bt = self.conv_block(ids.bott.0, ids.bott.1, p2)?;
        let u2 = self.tape.upsample_nearest2(bt)?;
        let cat2 = self.tape.concat(&[u2, e2], 1)?;
        let d2 = self.conv_block(ids.dec2.0, ids.dec2.1, cat2)?;
        let u1 = self.tape.upsample_nearest2(d2)?;
        let cat1 = self.tape.concat(&[u1, e1], 1)?;
        let d1 = self.conv_block(ids.dec1.0, ids.dec1.1, cat1)?;
        let v = self.tape.global_avg_pool(d1)?;
        self.head(&ids.head, v)
    }

    fn cnn(&mut self, ids: &CnnIds, x: NodeId) -> Result<NodeId> {
        let c1 = self.conv_block(ids.c1.0, ids.c1.1, x)?;
        let p1 = self.tape.maxpool2d(c1, 2)?;
        let c2 = self.conv_block(ids.c2.0, ids.c2.1, p1)?;
        let p2 = self.tape.maxpool2d(c2, 2)?;
        let v = self.tape.global_avg_pool(p2)?;
        self.head(&ids.head, v)
    }
}

// ------------------------------------------------------- f32 batch surface

impl FusionNetwork<f32> {
    /// Assemble normalized [N,C,H,W] input tensors for a batch, applying the
    /// multi-scale stack for FM3 variants.
    pub fn batch_inputs(&self, patches: &[PatchPair]) -> Result<(Tensor, Tensor)> {
        if patches.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut sar_data = Vec::new();
        let mut msi_data = Vec::new();
        let mut sar_shape = None;
        for p in patches {
            if !p.is_finite() {
                return Err(Error::Data("batch contains non-finite values".into()));
            }
            let (s, m) = match &self.spec.scale_spec {
                Some(spec) => multi_scale_stack(p, spec)?,
                None => (p.sar.clone(), p.msi.clone()),
            };
            sar_shape.get_or_insert((s.shape.clone(), m.shape.clone()));
            sar_data.extend_from_slice(&s.data);
            msi_data.extend_from_slice(&m.data);
        }
        let (s_shape, m_shape) = sar_shape.unwrap();
        let n = patches.len();
        Ok((
            Tensor::new(&[n, s_shape[0], s_shape[1], s_shape[2]], sar_data)?,
            Tensor::new(&[n, m_shape[0], m_shape[1], m_shape[2]], msi_data)?,
        ))
    }

    /// Forward a batch of (already normalized) patches; returns class
    /// probabilities `[N, num_classes]`. Infer mode is deterministic.
    pub fn forward(&mut self, patches: &[PatchPair], mode: RunMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let run = self.forward_batch_graph(&mut tape, patches, mode, &mut ChaCha8Rng::seed_from_u64(0))?;
        let out = tape.value(run.out.probs).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("forward output".into()));
        }
        Ok(out)
    }

    /// Like [`FusionNetwork::forward`] but on an existing tape, for training.
    pub fn forward_batch_graph(
        &mut self,
        tape: &mut Tape<f32>,
        patches: &[PatchPair],
        mode: RunMode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<GraphRun> {
        let (sar, msi) = self.batch_inputs(patches)?;
        let sar = tape.leaf(sar);
        let msi = tape.leaf(msi);
        self.forward_graph(tape, sar, msi, mode, dropout_rng)
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&mut self, patches: &[PatchPair]) -> Result<Vec<usize>> {
        let probs = self.forward(patches, RunMode::Infer)?;
        Ok(argmax_rows(&probs.data, self.spec.num_classes))
    }

    /// FM4 only: infer-mode probabilities of the two branch classifiers.
    pub fn forward_branches(&mut self, patches: &[PatchPair]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run = self.forward_batch_graph(&mut tape, patches, RunMode::Infer, &mut rng)?;
        let (a, b) = run.out.branches.ok_or_else(|| {
            Error::Config(format!("{} has no decision-level branches", self.spec.variant))
        })?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }
}

pub fn argmax_rows(data: &[f32], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One-hot targets for a batch of merged labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Data(format!("label {l} out of range 0..{k}")));
        }
        data[i * k + l] = 1.0;
    }
    Tensor::new(&[labels.len(), k], data)
}

/// Normalize raw patches with explicit band stats (the manifest's).
pub fn normalize_batch(
    patches: &[PatchPair],
    sar_stats: &[BandStat],
    msi_stats: &[BandStat],
) -> Vec<PatchPair> {
    patches
        .iter()
        .map(|p| normalize_patch(p, sar_stats, msi_stats))
        .collect()
}
