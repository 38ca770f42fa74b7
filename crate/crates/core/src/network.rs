//! The shared trunk with its three branches, wired for training and
//! inference.

use std::collections::BTreeMap;

use crate::backbone::{backbone_forward, backbone_init, fan_in_uniform, BackboneConfig, BackboneState, BackboneTape};
use crate::data::LabeledDataset;
use crate::heads::{
    cosine_logits, cosine_similarity, high_head, mid_head, relation_head, BranchModel, Head, HeadConfig, HighHead,
    HighTape, Level, MidHead, MidTape, RelationHead, RelationInput, RelationTape,
};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub backbone: BackboneState,
    pub heads_config: HeadConfig,
    /// Indexed by [`Level::index`].
    pub branches: [BranchModel; 3],
}

pub struct Forward {
    /// Raw branch features, `[N, d]` each, in level order.
    pub features: [Tensor; 3],
    backbone: BackboneTape,
    mid: MidTape,
    high: HighTape,
    relation: RelationTape,
}

fn classifier_init(d: usize, classes: usize, cfg: &HeadConfig, level: Level, head: Head, rng: &mut RngStream) -> BranchModel {
    BranchModel {
        level,
        head,
        weights: fan_in_uniform(&[d, classes], d, rng),
        scale: Tensor::scalar(cfg.init_scale),
    }
}

impl Network {
    pub fn init(backbone: &BackboneConfig, heads: &HeadConfig, num_classes: usize, rng: &mut RngStream) -> Result<Self, String> {
        heads.validate()?;
        if num_classes == 0 {
            return Err("at least one base class is required".into());
        }
        let trunk = backbone_init(backbone, rng)?;
        let d = heads.embed_dim;
        let mid = MidHead::init(&backbone.tap_channels(), heads, rng);
        let high = HighHead::init(backbone.final_channels(), heads, rng);
        let relation = RelationHead::init(num_classes, heads, rng);
        let branches = [
            classifier_init(d, num_classes, heads, Level::Mid, Head::Mid(mid), rng),
            classifier_init(d, num_classes, heads, Level::High, Head::High(high), rng),
            classifier_init(d, num_classes, heads, Level::Relation, Head::Relation(relation), rng),
        ];
        Ok(Network {
            backbone: trunk,
            heads_config: heads.clone(),
            branches,
        })
    }

    pub fn branch(&self, level: Level) -> &BranchModel {
        &self.branches[level.index()]
    }

    pub fn branch_mut(&mut self, level: Level) -> &mut BranchModel {
        &mut self.branches[level.index()]
    }

    pub fn num_classes(&self) -> usize {
        self.branches[0].num_classes()
    }

    pub fn embed_dim(&self) -> usize {
        self.heads_config.embed_dim
    }

    fn mid_head(&self) -> &MidHead {
        match &self.branch(Level::Mid).head {
            Head::Mid(h) => h,
            _ => unreachable!("mid branch holds a mid head"),
        }
    }

    fn high_head(&self) -> &HighHead {
        match &self.branch(Level::High).head {
            Head::High(h) => h,
            _ => unreachable!("high branch holds a high head"),
        }
    }

    fn relation_head(&self) -> &RelationHead {
        match &self.branch(Level::Relation).head {
            Head::Relation(h) => h,
            _ => unreachable!("relation branch holds a relation head"),
        }
    }

    /// High-level scores fed (detached) to the relation head.
    fn relation_input(&self, high_features: &Tensor) -> Result<Tensor, TensorError> {
        let high = self.branch(Level::High);
        Ok(match self.heads_config.relation_input {
            RelationInput::Scaled => cosine_logits(high_features, &high.weights, &high.scale)?.into_value(),
            RelationInput::Unscaled => cosine_similarity(high_features, &high.weights)?.into_value(),
        })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Forward, TensorError> {
        let trunk = backbone_forward(&self.backbone, batch)?;
        let (f_mid, mid) = mid_head(&trunk.taps, self.mid_head())?;
        let (f_high, high) = high_head(&trunk.final_map, self.high_head())?;
        let logits = self.relation_input(&f_high)?;
        let (f_rel, relation) = relation_head(&logits, self.relation_head(), self.heads_config.relation_temperature)?;
        Ok(Forward {
            features: [f_mid, f_high, f_rel],
            backbone: trunk.tape,
            mid,
            high,
            relation,
        })
    }

    /// Parameter gradients of the feature extractors given gradients of the
    /// three branch features. Classifier gradients are not included.
    pub fn backward(&self, fwd: &Forward, d_features: [&Tensor; 3]) -> ParamGrads {
        let mut out = ParamGrads::new();
        let mid = fwd.mid.backward(d_features[0]);
        for (i, (k, b)) in mid.tap_kernels.into_iter().zip(mid.tap_biases).enumerate() {
            out.insert(format!("mid.tap{i}.weight"), k);
            out.insert(format!("mid.tap{i}.bias"), b);
        }
        out.insert("mid.proj.weight".into(), mid.proj_weight);
        out.insert("mid.proj.bias".into(), mid.proj_bias);

        let high = fwd.high.backward(d_features[1]);
        out.insert("high.proj.weight".into(), high.weight);
        out.insert("high.proj.bias".into(), high.bias);

        // The relation head's input is detached: d_logits is discarded.
        let rel = fwd.relation.backward(d_features[2]);
        out.insert("relation.fc1.weight".into(), rel.fc1_weight);
        out.insert("relation.fc1.bias".into(), rel.fc1_bias);
        out.insert("relation.fc2.weight".into(), rel.fc2_weight);
        out.insert("relation.fc2.bias".into(), rel.fc2_bias);

        let cfg = &self.backbone.config;
        let taps = if cfg.detach_taps { None } else { Some(mid.d_taps.as_slice()) };
        let trunk = fwd.backbone.backward(cfg, &high.d_map, taps);
        for (i, (k, b)) in trunk.kernels.into_iter().zip(trunk.biases).enumerate() {
            let (s, blk) = (i / cfg.blocks_per_stage, i % cfg.blocks_per_stage);
            out.insert(format!("backbone.s{s}.b{blk}.weight"), k);
            out.insert(format!("backbone.s{s}.b{blk}.bias"), b);
        }
        out
    }

    /// Branch features of every image in `data`, evaluated in chunks.
    pub fn embed(&self, data: &LabeledDataset) -> Result<[Tensor; 3], TensorError> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.embed_indices(data, &all)
    }

    pub fn embed_indices(&self, data: &LabeledDataset, indices: &[usize]) -> Result<[Tensor; 3], TensorError> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &data.images[i]).collect();
        self.embed_images(&refs)
    }

    pub fn embed_images(&self, images: &[&Tensor]) -> Result<[Tensor; 3], TensorError> {
        const CHUNK: usize = 64;
        let mut parts: [Vec<f64>; 3] = Default::default();
        for chunk in images.chunks(CHUNK) {
            let fwd = self.forward(&Tensor::stack(chunk)?)?;
            for (p, f) in parts.iter_mut().zip(&fwd.features) {
                p.extend_from_slice(f.data());
            }
        }
        let d = self.embed_dim();
        let n = images.len();
        let [a, b, c] = parts;
        Ok([
            Tensor::new(vec![n, d], a)?,
            Tensor::new(vec![n, d], b)?,
            Tensor::new(vec![n, d], c)?,
        ])
    }

    /// All parameters in a fixed order with their canonical names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let cfg = &self.backbone.config;
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            let (s, blk) = (i / cfg.blocks_per_stage, i % cfg.blocks_per_stage);
            out.push((format!("backbone.s{s}.b{blk}.weight"), &b.kernel));
            out.push((format!("backbone.s{s}.b{blk}.bias"), &b.bias));
        }
        for branch in &self.branches {
            match &branch.head {
                Head::Mid(h) => {
                    for (i, t) in h.taps.iter().enumerate() {
                        out.push((format!("mid.tap{i}.weight"), &t.kernel));
                        out.push((format!("mid.tap{i}.bias"), &t.bias));
                    }
                    out.push(("mid.proj.weight".into(), &h.proj.weight));
                    out.push(("mid.proj.bias".into(), &h.proj.bias));
                }
                Head::High(h) => {
                    out.push(("high.proj.weight".into(), &h.proj.weight));
                    out.push(("high.proj.bias".into(), &h.proj.bias));
                }
                Head::Relation(h) => {
                    out.push(("relation.fc1.weight".into(), &h.fc1.weight));
                    out.push(("relation.fc1.bias".into(), &h.fc1.bias));
                    out.push(("relation.fc2.weight".into(), &h.fc2.weight));
                    out.push(("relation.fc2.bias".into(), &h.fc2.bias));
                }
            }
            out.push((classifier_name(branch.level, "weight"), &branch.weights));
            out.push((classifier_name(branch.level, "scale"), &branch.scale));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let per = self.backbone.config.blocks_per_stage;
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            let (s, blk) = (i / per, i % per);
            out.push((format!("backbone.s{s}.b{blk}.weight"), &mut b.kernel));
            out.push((format!("backbone.s{s}.b{blk}.bias"), &mut b.bias));
        }
        for branch in &mut self.branches {
            match &mut branch.head {
                Head::Mid(h) => {
                    for (i, t) in h.taps.iter_mut().enumerate() {
                        out.push((format!("mid.tap{i}.weight"), &mut t.kernel));
                        out.push((format!("mid.tap{i}.bias"), &mut t.bias));
                    }
                    out.push(("mid.proj.weight".into(), &mut h.proj.weight));
                    out.push(("mid.proj.bias".into(), &mut h.proj.bias));
                }
                Head::High(h) => {
                    out.push(("high.proj.weight".into(), &mut h.proj.weight));
                    out.push(("high.proj.bias".into(), &mut h.proj.bias));
                }
                Head::Relation(h) => {
                    out.push(("relation.fc1.weight".into(), &mut h.fc1.weight));
                    out.push(("relation.fc1.bias".into(), &mut h.fc1.bias));
                    out.push(("relation.fc2.weight".into(), &mut h.fc2.weight));
                    out.push(("relation.fc2.bias".into(), &mut h.fc2.bias));
                }
            }
            out.push((classifier_name(branch.level, "weight"), &mut branch.weights));
            out.push((classifier_name(branch.level, "scale"), &mut branch.scale));
        }
        out
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuilds a network of the given architecture from named tensors.
    pub fn from_tensors(
        backbone: &BackboneConfig,
        heads: &HeadConfig,
        num_classes: usize,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self, String> {
        let mut rng = crate::rng::rng_stream(0, 0);
        let mut net = Network::init(backbone, heads, num_classes, &mut rng)?;
        for (name, slot) in net.params_mut() {
            let t = tensors.get(&name).ok_or_else(|| format!("missing tensor `{name}`"))?;
            if t.shape() != slot.shape() {
                return Err(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok(net)
    }
}

pub fn classifier_name(level: Level, part: &str) -> String {
    format!("{}.classifier.{part}", level.name())
}

pub fn is_classifier_param(name: &str) -> bool {
    name.contains(".classifier.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    #[test]
    fn parameter_names_are_unique_and_match_gradients() {
        let net = Network::init(&BackboneConfig::default(), &HeadConfig::default(), 4, &mut rng_stream(1, 0)).unwrap();
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());

        let batch = Tensor::full(&[2, 1, 32, 32], 0.3);
        let fwd = net.forward(&batch).unwrap();
        let ones = fwd.features.clone().map(|f| Tensor::full(f.shape(), 1.0));
        let grads = net.backward(&fwd, [&ones[0], &ones[1], &ones[2]]);
        for (name, t) in net.params() {
            if is_classifier_param(&name) {
                assert!(!grads.contains_key(&name));
            } else {
                assert_eq!(grads[&name].shape(), t.shape(), "{name}");
            }
        }
    }

    #[test]
    fn roundtrip_through_named_tensors() {
        let cfg = BackboneConfig::default();
        let heads = HeadConfig::default();
        let net = Network::init(&cfg, &heads, 3, &mut rng_stream(2, 0)).unwrap();
        let back = Network::from_tensors(&cfg, &heads, 3, &net.to_tensors()).unwrap();
        assert_eq!(back, net);
    }
}
