//! Feedback injected into the planning loop: physical events from the pose
//! synthesizer and the symbolic executor, preference events from humans.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scene_graph::{NodeId, Relation, RelationChange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Collision,
    Collapse,
    PreconditionFailure,
    Instruction,
    Adjustment,
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::Collision => "collision",
            FeedbackKind::Collapse => "collapse",
            FeedbackKind::PreconditionFailure => "precondition_failure",
            FeedbackKind::Instruction => "instruction",
            FeedbackKind::Adjustment => "adjustment",
        }
    }

    pub fn is_physical(self) -> bool {
        matches!(self, FeedbackKind::Collision | FeedbackKind::Collapse | FeedbackKind::PreconditionFailure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Synthesizer,
    Executor,
    Human,
}

/// Physical payload: the offending objects, a short error code
/// (`ContainerClosed`, `Collision`, ...) and the relations involved with their
/// source tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalDetail {
    pub code: String,
    pub object_ids: Vec<NodeId>,
    pub relations: Vec<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeedbackPayload {
    Physical(PhysicalDetail),
    Text { text: String },
    Adjustment { text: String, changes: Vec<RelationChange> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub kind: FeedbackKind,
    pub origin: Origin,
    pub payload: FeedbackPayload,
}

impl FeedbackEvent {
    pub fn collision(a: &str, b: &str, relations: Vec<Relation>) -> Self {
        Self {
            kind: FeedbackKind::Collision,
            origin: Origin::Synthesizer,
            payload: FeedbackPayload::Physical(PhysicalDetail {
                code: "Collision".into(),
                object_ids: alloc::vec![a.into(), b.into()],
                relations,
                step: None,
            }),
        }
    }

    pub fn collapse(child: &str, parent: &str, relations: Vec<Relation>) -> Self {
        Self {
            kind: FeedbackKind::Collapse,
            origin: Origin::Synthesizer,
            payload: FeedbackPayload::Physical(PhysicalDetail {
                code: "Collapse".into(),
                object_ids: alloc::vec![child.into(), parent.into()],
                relations,
                step: None,
            }),
        }
    }

    pub fn precondition(code: &str, step: Option<usize>, object_ids: Vec<NodeId>, relations: Vec<Relation>) -> Self {
        Self {
            kind: FeedbackKind::PreconditionFailure,
            origin: Origin::Executor,
            payload: FeedbackPayload::Physical(PhysicalDetail { code: code.into(), object_ids, relations, step }),
        }
    }

    pub fn instruction(text: &str) -> Self {
        Self {
            kind: FeedbackKind::Instruction,
            origin: Origin::Human,
            payload: FeedbackPayload::Text { text: text.into() },
        }
    }

    pub fn adjustment(text: &str, changes: Vec<RelationChange>) -> Self {
        Self {
            kind: FeedbackKind::Adjustment,
            origin: Origin::Human,
            payload: FeedbackPayload::Adjustment { text: text.into(), changes },
        }
    }

    /// Physical kinds come from the synthesizer or executor, preference kinds from a human.
    pub fn is_consistent(&self) -> bool {
        match self.origin {
            Origin::Human => !self.kind.is_physical(),
            Origin::Synthesizer | Origin::Executor => self.kind.is_physical(),
        }
    }

    pub fn physical(&self) -> Option<&PhysicalDetail> {
        match &self.payload {
            FeedbackPayload::Physical(d) => Some(d),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.payload {
            FeedbackPayload::Text { text } | FeedbackPayload::Adjustment { text, .. } => Some(text),
            FeedbackPayload::Physical(_) => None,
        }
    }
}
