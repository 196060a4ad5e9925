//! Heterogeneous conversation graph.
//!
//! Each utterance contributes a super-node of three modality nodes plus an
//! emotional-context and a causal-context node; the conversation adds one
//! super-node of three modality nodes. Super-edges follow the speaker walk
//! over the same-speaker context window; expanded edges are what the fusion
//! layers attend over.

use std::fmt;
use std::rc::Rc;

use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{Conversation, Modality};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    TextMod(usize),
    AudioMod(usize),
    VideoMod(usize),
    EmotionCtx(usize),
    CauseCtx(usize),
    ConvText,
    ConvAudio,
    ConvVideo,
}

impl NodeKind {
    pub fn modality_node(m: Modality, utt: usize) -> Self {
        match m {
            Modality::Text => NodeKind::TextMod(utt),
            Modality::Audio => NodeKind::AudioMod(utt),
            Modality::Video => NodeKind::VideoMod(utt),
        }
    }

    pub fn conversation_node(m: Modality) -> Self {
        match m {
            Modality::Text => NodeKind::ConvText,
            Modality::Audio => NodeKind::ConvAudio,
            Modality::Video => NodeKind::ConvVideo,
        }
    }

    pub fn utterance(&self) -> Option<usize> {
        match *self {
            NodeKind::TextMod(i)
            | NodeKind::AudioMod(i)
            | NodeKind::VideoMod(i)
            | NodeKind::EmotionCtx(i)
            | NodeKind::CauseCtx(i) => Some(i),
            _ => None,
        }
    }

    /// Modality carried by a modality or conversation node.
    pub fn modality(&self) -> Option<Modality> {
        match self {
            NodeKind::TextMod(_) | NodeKind::ConvText => Some(Modality::Text),
            NodeKind::AudioMod(_) | NodeKind::ConvAudio => Some(Modality::Audio),
            NodeKind::VideoMod(_) | NodeKind::ConvVideo => Some(Modality::Video),
            _ => None,
        }
    }

    pub fn is_context(&self) -> bool {
        matches!(self, NodeKind::EmotionCtx(_) | NodeKind::CauseCtx(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::TextMod(_) => "text",
            NodeKind::AudioMod(_) => "audio",
            NodeKind::VideoMod(_) => "video",
            NodeKind::EmotionCtx(_) => "emotion_ctx",
            NodeKind::CauseCtx(_) => "cause_ctx",
            NodeKind::ConvText => "conv_text",
            NodeKind::ConvAudio => "conv_audio",
            NodeKind::ConvVideo => "conv_video",
        }
    }

    /// Dense node id for a conversation of `n` utterances: per utterance in
    /// order text, audio, video, emotion context, cause context; then the
    /// three conversation nodes.
    pub fn id(&self, n: usize) -> usize {
        match *self {
            NodeKind::TextMod(i) => 5 * (i - 1),
            NodeKind::AudioMod(i) => 5 * (i - 1) + 1,
            NodeKind::VideoMod(i) => 5 * (i - 1) + 2,
            NodeKind::EmotionCtx(i) => 5 * (i - 1) + 3,
            NodeKind::CauseCtx(i) => 5 * (i - 1) + 4,
            NodeKind::ConvText => 5 * n,
            NodeKind::ConvAudio => 5 * n + 1,
            NodeKind::ConvVideo => 5 * n + 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SuperNode {
    Utterance(usize),
    Conversation,
    EmotionCtx(usize),
    CauseCtx(usize),
}

impl fmt::Display for SuperNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuperNode::Utterance(i) => write!(f, "SN{i}"),
            SuperNode::Conversation => f.write_str("SNd"),
            SuperNode::EmotionCtx(i) => write!(f, "Ne{i}"),
            SuperNode::CauseCtx(i) => write!(f, "Nc{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    SameSpeaker,
    DiffSpeaker,
    GlobalConn,
    EmotionConn,
    CauseConn,
}

impl RelationKind {
    pub const ALL: [RelationKind; 5] = [
        RelationKind::SameSpeaker,
        RelationKind::DiffSpeaker,
        RelationKind::GlobalConn,
        RelationKind::EmotionConn,
        RelationKind::CauseConn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationKind::SameSpeaker => "same_speaker",
            RelationKind::DiffSpeaker => "diff_speaker",
            RelationKind::GlobalConn => "global_conn",
            RelationKind::EmotionConn => "emotion_conn",
            RelationKind::CauseConn => "cause_conn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SuperEdge {
    pub src: SuperNode,
    pub dst: SuperNode,
    pub relation: RelationKind,
    pub bidirectional: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpeakerRelation {
    Same,
    Diff,
}

/// Expanded edge label. Each distinct label is one meta-path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeLabel {
    /// Cross-modal edge inside one utterance.
    Intra(Modality, Modality),
    ToEmotion(Modality),
    ToCause(Modality),
    /// Modality pair across a speaker super-edge.
    Speaker(SpeakerRelation, Modality, Modality),
    /// Same-modality link between an utterance and the conversation node.
    Global(Modality),
    SelfLoop,
}

/// Which fusion scale a meta-path belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathScale {
    Intra,
    Inter,
    SelfLoop,
}

impl EdgeLabel {
    /// All 34 labels in a fixed order.
    pub fn all() -> Vec<EdgeLabel> {
        let mut out = Vec::with_capacity(34);
        for a in Modality::ALL {
            for b in Modality::ALL {
                if a != b {
                    out.push(EdgeLabel::Intra(a, b));
                }
            }
        }
        out.extend(Modality::ALL.map(EdgeLabel::ToEmotion));
        out.extend(Modality::ALL.map(EdgeLabel::ToCause));
        for rel in [SpeakerRelation::Same, SpeakerRelation::Diff] {
            for a in Modality::ALL {
                for b in Modality::ALL {
                    out.push(EdgeLabel::Speaker(rel, a, b));
                }
            }
        }
        out.extend(Modality::ALL.map(EdgeLabel::Global));
        out.push(EdgeLabel::SelfLoop);
        out
    }

    pub fn scale(&self) -> PathScale {
        match self {
            EdgeLabel::Intra(..) | EdgeLabel::ToEmotion(_) | EdgeLabel::ToCause(_) => PathScale::Intra,
            EdgeLabel::Speaker(..) | EdgeLabel::Global(_) => PathScale::Inter,
            EdgeLabel::SelfLoop => PathScale::SelfLoop,
        }
    }

    /// Short identifier, e.g. `intra:t>a`, `ss:a>v`, `gc:t`, `v>e`.
    pub fn code(&self) -> String {
        match self {
            EdgeLabel::Intra(a, b) => format!("intra:{}>{}", a.key(), b.key()),
            EdgeLabel::ToEmotion(m) => format!("{}>e", m.key()),
            EdgeLabel::ToCause(m) => format!("{}>c", m.key()),
            EdgeLabel::Speaker(SpeakerRelation::Same, a, b) => format!("ss:{}>{}", a.key(), b.key()),
            EdgeLabel::Speaker(SpeakerRelation::Diff, a, b) => format!("ds:{}>{}", a.key(), b.key()),
            EdgeLabel::Global(m) => format!("gc:{}", m.key()),
            EdgeLabel::SelfLoop => "self".into(),
        }
    }
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: EdgeLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub n: usize,
    pub k: usize,
    pub nodes: Vec<NodeKind>,
    pub super_edges: Vec<SuperEdge>,
    pub edges: Vec<Edge>,
}

/// Runs the speaker walk: for every utterance `i >= 2`, step back through
/// predecessors `w = i-1, i-2, ...`, adding a same-speaker or
/// different-speaker super-edge `w -> i` for each, until `k` same-speaker
/// predecessors were seen or the start is reached. Then every utterance gets
/// its emotion, cause and (bidirectional) global connection.
pub fn build_super_graph<S: PartialEq>(speakers: &[S], k: usize) -> Result<HeteroGraph> {
    if k < 1 {
        return Err(Error::Config("context window k must be at least 1".into()));
    }
    let n = speakers.len();
    if n == 0 {
        return Err(Error::Validation("cannot build a graph for an empty conversation".into()));
    }
    let mut super_edges = Vec::new();
    for i in 2..=n {
        let mut same = 0;
        let mut w = i - 1;
        while w > 0 && same < k {
            let relation = if speakers[w - 1] == speakers[i - 1] {
                same += 1;
                RelationKind::SameSpeaker
            } else {
                RelationKind::DiffSpeaker
            };
            super_edges.push(SuperEdge {
                src: SuperNode::Utterance(w),
                dst: SuperNode::Utterance(i),
                relation,
                bidirectional: false,
            });
            w -= 1;
        }
    }
    for i in 1..=n {
        let u = SuperNode::Utterance(i);
        super_edges.push(SuperEdge {
            src: u,
            dst: SuperNode::EmotionCtx(i),
            relation: RelationKind::EmotionConn,
            bidirectional: false,
        });
        super_edges.push(SuperEdge {
            src: u,
            dst: SuperNode::CauseCtx(i),
            relation: RelationKind::CauseConn,
            bidirectional: false,
        });
        super_edges.push(SuperEdge {
            src: u,
            dst: SuperNode::Conversation,
            relation: RelationKind::GlobalConn,
            bidirectional: true,
        });
    }
    let mut nodes = Vec::with_capacity(5 * n + 3);
    for i in 1..=n {
        nodes.extend([
            NodeKind::TextMod(i),
            NodeKind::AudioMod(i),
            NodeKind::VideoMod(i),
            NodeKind::EmotionCtx(i),
            NodeKind::CauseCtx(i),
        ]);
    }
    nodes.extend([NodeKind::ConvText, NodeKind::ConvAudio, NodeKind::ConvVideo]);
    Ok(HeteroGraph {
        n,
        k,
        nodes,
        super_edges,
        edges: Vec::new(),
    })
}

/// Populates modality-level edges from the super-edges.
pub fn expand_super_edges(g: &mut HeteroGraph) {
    let n = g.n;
    let id = |k: NodeKind| k.id(n);
    let mut edges = Vec::new();
    for se in &g.super_edges {
        match (se.relation, se.src, se.dst) {
            (RelationKind::SameSpeaker | RelationKind::DiffSpeaker, SuperNode::Utterance(w), SuperNode::Utterance(i)) => {
                let rel = if se.relation == RelationKind::SameSpeaker {
                    SpeakerRelation::Same
                } else {
                    SpeakerRelation::Diff
                };
                for a in Modality::ALL {
                    for b in Modality::ALL {
                        edges.push(Edge {
                            src: id(NodeKind::modality_node(a, w)),
                            dst: id(NodeKind::modality_node(b, i)),
                            label: EdgeLabel::Speaker(rel, a, b),
                        });
                    }
                }
            }
            (RelationKind::EmotionConn, SuperNode::Utterance(i), _) => {
                for m in Modality::ALL {
                    edges.push(Edge {
                        src: id(NodeKind::modality_node(m, i)),
                        dst: id(NodeKind::EmotionCtx(i)),
                        label: EdgeLabel::ToEmotion(m),
                    });
                }
            }
            (RelationKind::CauseConn, SuperNode::Utterance(i), _) => {
                for m in Modality::ALL {
                    edges.push(Edge {
                        src: id(NodeKind::modality_node(m, i)),
                        dst: id(NodeKind::CauseCtx(i)),
                        label: EdgeLabel::ToCause(m),
                    });
                }
            }
            (RelationKind::GlobalConn, SuperNode::Utterance(i), _) => {
                for m in Modality::ALL {
                    let (u, d) = (id(NodeKind::modality_node(m, i)), id(NodeKind::conversation_node(m)));
                    edges.push(Edge {
                        src: u,
                        dst: d,
                        label: EdgeLabel::Global(m),
                    });
                    edges.push(Edge {
                        src: d,
                        dst: u,
                        label: EdgeLabel::Global(m),
                    });
                }
            }
            _ => unreachable!("super-edge shapes are fixed by build_super_graph"),
        }
    }
    for i in 1..=n {
        for a in Modality::ALL {
            for b in Modality::ALL {
                if a != b {
                    edges.push(Edge {
                        src: id(NodeKind::modality_node(a, i)),
                        dst: id(NodeKind::modality_node(b, i)),
                        label: EdgeLabel::Intra(a, b),
                    });
                }
            }
        }
    }
    for v in 0..g.nodes.len() {
        edges.push(Edge {
            src: v,
            dst: v,
            label: EdgeLabel::SelfLoop,
        });
    }
    edges.sort();
    g.edges = edges;
}

impl HeteroGraph {
    /// Super-edges plus their expansion for one conversation.
    pub fn for_conversation(conv: &Conversation, k: usize) -> Result<Self> {
        let mut g = build_super_graph(&conv.speakers(), k)?;
        expand_super_edges(&mut g);
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_id(&self, kind: NodeKind) -> usize {
        kind.id(self.n)
    }

    /// Sources of `label` edges into `dst`, ascending.
    pub fn neighbors(&self, dst: usize, label: EdgeLabel) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.dst == dst && e.label == label)
            .map(|e| e.src)
            .collect()
    }

    /// JSON dump: nodes ordered by (utterance, kind) with conversation nodes
    /// last, super-edges in construction order, expanded edges sorted.
    pub fn to_json(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, k)| json!({ "id": id, "kind": k.name(), "utt": k.utterance() }))
            .collect();
        let super_edges: Vec<Value> = self
            .super_edges
            .iter()
            .map(|e| {
                json!({
                    "src": e.src.to_string(),
                    "dst": e.dst.to_string(),
                    "relation": e.relation.as_str(),
                    "bidirectional": e.bidirectional,
                })
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| json!({ "src": e.src, "dst": e.dst, "label": e.label.code() }))
            .collect();
        json!({ "n": self.n, "k": self.k, "nodes": nodes, "super_edges": super_edges, "edges": edges })
    }
}

/// Initial node states (`(5n + 3) x d_h`): modality nodes take their own
/// projected row, context nodes the text row, conversation nodes the column
/// mean of their modality.
pub fn init_node_states(tape: &mut Tape, g: &HeteroGraph, projected: [Var; 3]) -> Result<Var> {
    let n = g.n;
    let d = tape.value(projected[0]).cols();
    for (m, &p) in Modality::ALL.iter().zip(&projected) {
        let t = tape.value(p);
        if t.rows() != n || t.cols() != d {
            return Err(Error::shape(format!(
                "projected {} features are {}x{}, expected {n}x{d}",
                m.key(),
                t.rows(),
                t.cols()
            )));
        }
    }
    let means: Vec<Var> = projected.iter().map(|&p| tape.mean_rows(p)).collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&[projected[0], projected[1], projected[2], means[0], means[1], means[2]])?;
    let rows: Vec<usize> = g
        .nodes
        .iter()
        .map(|k| match *k {
            NodeKind::TextMod(i) | NodeKind::EmotionCtx(i) | NodeKind::CauseCtx(i) => i - 1,
            NodeKind::AudioMod(i) => n + i - 1,
            NodeKind::VideoMod(i) => 2 * n + i - 1,
            NodeKind::ConvText => 3 * n,
            NodeKind::ConvAudio => 3 * n + 1,
            NodeKind::ConvVideo => 3 * n + 2,
        })
        .collect();
    tape.gather_rows(stacked, Rc::from(rows))
}
