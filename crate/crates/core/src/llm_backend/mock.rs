//! Deterministic stand-in for the chat model.
//!
//! The mock reads only the prompt text: the `STAGE:` line of the system part
//! and the bracketed context sections. Its behavior comes from a rule table
//! (lexicon, repair rules, preference keywords, summary templates) shipped as
//! JSON, so the same prompt always yields the same answer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    render, BackendError, PlannerBackend, ProfileItem, PromptBundle, RawCompletion, Stage, StagePayload, Usage,
};
use crate::planner::{ActionStep, Primitive};
use crate::preference::{contains_word, estimate_tokens, word_ends};
use crate::scene_graph::{group_placeholder, placeholder_category, RelationKind};

pub const SHIPPED_RULES_JSON: &str = include_str!("../../fixtures/mock_rules.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repair {
    /// Insert `open(container)` before the failing step.
    OpenBefore,
    DropStep,
    /// Turn the failing stack into a side-by-side placement.
    Unstack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRule {
    pub tag: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientationRule {
    pub phrase: String,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryTemplates {
    pub unstacked: Template,
    /// Object taken off the avoided base.
    pub vacated: Template,
    pub contained: Template,
    pub stacked: Template,
    pub opened: Template,
    pub closed: Template,
    pub related: Template,
    pub placed: Template,
    pub moved: Template,
    pub fallback: Template,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRules {
    /// Object label to category.
    pub lexicon: BTreeMap<String, String>,
    pub stackable: Vec<String>,
    /// Containers the mock forgets to open before filling.
    #[serde(default)]
    pub omit_open: Vec<String>,
    /// Failure code to repair.
    pub repairs: BTreeMap<String, Repair>,
    pub preference_tags: Vec<TagRule>,
    pub orientation: Vec<OrientationRule>,
    pub sleep_categories: Vec<String>,
    pub avoid_base_label: String,
    /// Category to base labels it naturally goes on or in.
    #[serde(default)]
    pub affinity: BTreeMap<String, Vec<String>>,
    pub summaries: SummaryTemplates,
    pub profile_templates: BTreeMap<String, String>,
    pub profile_fallback: String,
}

impl MockRules {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_RULES_JSON).expect("shipped mock rules parse")
    }

    /// Behavior tags mentioned in a text.
    pub fn tag_text(&self, text: &str) -> BTreeSet<String> {
        let lower = text.to_lowercase();
        self.preference_tags
            .iter()
            .filter(|r| r.keywords.iter().any(|k| contains_word(&lower, k)))
            .map(|r| r.tag.clone())
            .collect()
    }

    fn category_of(&self, label: &str) -> String {
        let cat = self.lexicon.get(label).cloned().unwrap_or_else(|| label.to_string());
        cat.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
    }

    fn is_stackable(&self, label: &str) -> bool {
        self.stackable.iter().any(|s| s == label)
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    rules: MockRules,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MockRules::shipped())
    }
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }

    /// The answer to a full prompt text.
    pub fn respond(&self, prompt: &str) -> String {
        let v = View::parse(prompt);
        let Some(stage) = v.stage else {
            return "I cannot tell which stage this is.".into();
        };
        let tags = self.tags(&v);
        let payload = match stage {
            Stage::Categorize => self.categorize(&v, &tags),
            Stage::Intergroup => StagePayload::Steps(self.intergroup(&v, &tags)),
            Stage::Intragroup => StagePayload::Steps(self.intragroup(&v, &tags)),
            Stage::Replan => StagePayload::Steps(self.replan(&v, &tags)),
            Stage::SummarizeAdjustment => self.summarize(&v),
            Stage::Profile => self.profile(&v),
        };
        render(&payload)
    }

    fn tags(&self, v: &View) -> BTreeSet<String> {
        let mut tags = BTreeSet::new();
        for text in v.preferences.iter().chain(v.events.iter().filter(|e| e.code.is_none()).map(|e| &e.text)) {
            tags.extend(self.rules.tag_text(text));
        }
        tags
    }

    fn categorize(&self, v: &View, tags: &BTreeSet<String>) -> StagePayload {
        let mix = tags.contains("mix") && !tags.contains("separate");
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for o in v.objects.values().filter(|o| o.kind != "base") {
            let cat = if mix { "mixed".to_string() } else { self.rules.category_of(&o.label) };
            groups.entry(cat).or_default().push(o.id.clone());
        }
        StagePayload::Groups(groups.into_iter().collect())
    }

    fn bases<'v>(&self, v: &'v View) -> Vec<&'v ObjView> {
        v.objects.values().filter(|o| o.kind == "base").collect()
    }

    fn mentioned<'v>(&self, v: &'v View) -> Vec<&'v ObjView> {
        let instr = v.instruction.to_lowercase();
        self.bases(v)
            .into_iter()
            .filter(|b| contains_word(&instr, &b.spoken()) || contains_word(&instr, &b.id))
            .collect()
    }

    /// Container shared by every group when `same_container` is active.
    fn shared_container<'v>(&self, v: &'v View) -> Option<&'v ObjView> {
        self.mentioned(v).into_iter().find(|o| o.container).or_else(|| self.bases(v).into_iter().find(|o| o.container))
    }

    fn target_for<'v>(
        &self,
        v: &'v View,
        tags: &BTreeSet<String>,
        index: usize,
        category: &str,
    ) -> Option<&'v ObjView> {
        let bases = self.bases(v);
        let mentioned = self.mentioned(v);
        let mut candidates = if mentioned.is_empty() {
            bases.iter().copied().filter(|b| !b.container).take(1).collect::<Vec<_>>()
        } else {
            mentioned
        };
        if candidates.is_empty() {
            candidates = bases.iter().copied().take(1).collect();
        }
        if tags.contains("bed_sleep_only") && !self.rules.sleep_categories.iter().any(|c| c == category) {
            let avoid = &self.rules.avoid_base_label;
            candidates.retain(|b| &b.label != avoid);
            if candidates.is_empty() {
                candidates = bases.iter().copied().filter(|b| &b.label != avoid && !b.container).collect();
            }
            if candidates.is_empty() {
                candidates = bases.iter().copied().filter(|b| &b.label != avoid).collect();
            }
        }
        if candidates.is_empty() {
            return None;
        }
        if let Some(labels) = self.rules.affinity.get(category) {
            if let Some(b) = candidates.iter().find(|b| labels.contains(&b.label)) {
                return Some(b);
            }
        }
        Some(candidates[index % candidates.len()])
    }

    fn intergroup(&self, v: &View, tags: &BTreeSet<String>) -> Vec<ActionStep> {
        let mut steps = Vec::new();
        let mut opened = BTreeSet::new();
        let shared = if tags.contains("same_container") { self.shared_container(v) } else { None };
        for (i, (cat, _)) in v.groups.iter().enumerate() {
            let Some(target) = shared.or_else(|| self.target_for(v, tags, i, cat)) else { continue };
            if target.container && target.open == Some(false) && opened.insert(target.id.clone()) {
                steps.push(ActionStep::unary(Primitive::Open, &target.id));
            }
            let prim = if target.container { Primitive::PutIn } else { Primitive::PutOn };
            steps.push(ActionStep::binary(prim, &target.id, &group_placeholder(cat)));
        }
        steps.extend(self.orientation_steps(v));
        steps
    }

    fn group_mentioned_at(&self, v: &View, text: &str, cat: &str) -> Option<usize> {
        let mut words: Vec<String> = alloc::vec![cat.replace('_', " ")];
        if let Some((_, members)) = v.groups.iter().find(|(c, _)| c == cat) {
            words.extend(members.iter().filter_map(|m| v.objects.get(m)).map(ObjView::spoken));
        }
        words.iter().filter_map(|w| find_word(text, w)).min()
    }

    /// `put_near(group:reference, group:subject) -> kind` for each orientation
    /// preference naming a group.
    fn orientation_steps(&self, v: &View) -> Vec<ActionStep> {
        let mut out: Vec<ActionStep> = Vec::new();
        if v.groups.len() < 2 {
            return out;
        }
        for text in &v.preferences {
            let lower = text.to_lowercase();
            let Some((at, rule)) = self
                .rules
                .orientation
                .iter()
                .filter_map(|r| lower.find(&r.phrase).map(|i| (i, r)))
                .min_by_key(|(i, _)| *i)
            else {
                continue;
            };
            let (before, after) = lower.split_at(at);
            let subject =
                v.groups.iter().find(|(c, _)| self.group_mentioned_at(v, before, c).is_some()).map(|(c, _)| c);
            let Some(subject) = subject else { continue };
            let reference = v
                .groups
                .iter()
                .filter(|(c, _)| c != subject)
                .filter_map(|(c, _)| self.group_mentioned_at(v, after, c).map(|i| (i, c)))
                .min()
                .map(|(_, c)| c)
                .or_else(|| v.groups.iter().map(|(c, _)| c).find(|c| *c != subject));
            let Some(reference) = reference else { continue };
            let step =
                ActionStep::binary(Primitive::PutNear, &group_placeholder(reference), &group_placeholder(subject))
                    .with_relation(rule.kind);
            if !out.contains(&step) {
                out.push(step);
            }
        }
        out
    }

    fn intragroup(&self, v: &View, tags: &BTreeSet<String>) -> Vec<ActionStep> {
        let Some(cat) = v.input.iter().find_map(|l| l.strip_prefix("group ")) else { return Vec::new() };
        let Some((_, members)) = v.groups.iter().find(|(c, _)| c == cat) else { return Vec::new() };
        let objs: Vec<&ObjView> = members.iter().filter_map(|m| v.objects.get(m)).collect();
        if objs.len() < 2 {
            return Vec::new();
        }
        let mut steps = Vec::new();
        if let Some(c) = objs.iter().find(|o| o.container) {
            let closed = c.open == Some(false);
            let bother = closed && !self.rules.omit_open.contains(&c.label);
            if bother {
                steps.push(ActionStep::unary(Primitive::Open, &c.id));
            }
            for o in objs.iter().filter(|o| o.id != c.id) {
                steps.push(ActionStep::binary(Primitive::PutIn, &c.id, &o.id));
            }
            if bother {
                steps.push(ActionStep::unary(Primitive::Close, &c.id));
            }
            return steps;
        }
        let no_identical = tags.contains("no_identical_stacking");
        let order = if no_identical { interleave_labels(&objs) } else { objs };
        // stacks grow on `top`; anything else goes next to the stack's root
        let (mut root, mut top, mut height) = (order[0], order[0], 1);
        for &b in &order[1..] {
            if height < MAX_STACK && self.stack_allowed(top, b, tags) {
                steps.push(ActionStep::binary(Primitive::PutOn, &top.id, &b.id));
                top = b;
                height += 1;
            } else {
                steps.push(ActionStep::binary(Primitive::PutNear, &root.id, &b.id));
                (root, top, height) = (b, b, 1);
            }
        }
        steps
    }

    fn stack_allowed(&self, parent: &ObjView, child: &ObjView, tags: &BTreeSet<String>) -> bool {
        self.rules.is_stackable(&parent.label)
            && self.rules.is_stackable(&child.label)
            && !tags.contains("no_stacking")
            && !(tags.contains("no_identical_stacking") && parent.label == child.label)
    }

    fn replan(&self, v: &View, tags: &BTreeSet<String>) -> Vec<ActionStep> {
        let plan = &v.plan;
        let mut drop = BTreeSet::new();
        let mut open_before: BTreeMap<String, usize> = BTreeMap::new();
        let mut unstack: Vec<Vec<String>> = Vec::new();
        for e in &v.events {
            let Some(code) = &e.code else { continue };
            match self.rules.repairs.get(code) {
                Some(Repair::OpenBefore) => {
                    if let (Some(step), Some(c)) = (e.step, e.objects.first()) {
                        let slot = open_before.entry(c.clone()).or_insert(step);
                        *slot = (*slot).min(step);
                    }
                }
                Some(Repair::DropStep) => {
                    if let Some(step) = e.step {
                        drop.insert(step);
                    }
                }
                Some(Repair::Unstack) => {
                    // collapse names [child, parent]; a collision names either side
                    let named: &[String] =
                        if code == "Collapse" { &e.objects[..e.objects.len().min(1)] } else { &e.objects };
                    unstack.push(named.iter().rev().cloned().collect());
                }
                None => {}
            }
        }
        let mut inserts: BTreeMap<usize, Vec<ActionStep>> = BTreeMap::new();
        for (c, step) in open_before {
            let already = plan[..step.min(plan.len())]
                .iter()
                .enumerate()
                .any(|(i, s)| !drop.contains(&i) && s.primitive == Primitive::Open && s.target() == c);
            if !already {
                inserts.entry(step).or_default().push(ActionStep::unary(Primitive::Open, &c));
            }
        }
        let mut steps = Vec::new();
        for (i, s) in plan.iter().enumerate() {
            if let Some(extra) = inserts.remove(&i) {
                steps.extend(extra);
            }
            if !drop.contains(&i) {
                steps.push(s.clone());
            }
        }
        for extra in inserts.into_values() {
            steps.extend(extra);
        }
        // one object per event: the later-named one that is stacked
        let mut moved = BTreeSet::new();
        for candidates in unstack {
            if candidates.iter().any(|c| moved.contains(c)) {
                continue;
            }
            let found = candidates.iter().find_map(|child| {
                steps
                    .iter()
                    .position(|s| {
                        matches!(s.primitive, Primitive::PutOn | Primitive::PutIn)
                            && s.target() == child
                            && s.parent().and_then(|p| v.objects.get(p)).is_some_and(|p| p.kind != "base")
                    })
                    .map(|i| (i, child))
            });
            let Some((i, child)) = found else { continue };
            let root = stack_root(&steps, steps[i].parent().unwrap_or_default(), v);
            steps[i] = ActionStep::binary(Primitive::PutNear, &root, child);
            moved.insert(child.clone());
        }
        self.apply_preferences(v, tags, steps)
    }

    fn apply_preferences(&self, v: &View, tags: &BTreeSet<String>, mut steps: Vec<ActionStep>) -> Vec<ActionStep> {
        for s in steps.iter_mut() {
            if s.primitive != Primitive::PutOn {
                continue;
            }
            let (Some(p), Some(c)) = (s.parent().and_then(|p| v.objects.get(p)), v.objects.get(s.target())) else {
                continue;
            };
            if p.kind != "base"
                && !self.stack_allowed(p, c, tags)
                && (tags.contains("no_stacking") || tags.contains("no_identical_stacking"))
            {
                *s = ActionStep::binary(Primitive::PutNear, &p.id, &c.id);
            }
        }
        if tags.contains("same_container") {
            if let Some(shared) = self.shared_container(v) {
                let mut first_use = None;
                for (i, s) in steps.iter_mut().enumerate() {
                    let group_level = placeholder_category(s.target()).is_some();
                    let on_base = s.parent().and_then(|p| v.objects.get(p)).is_some_and(|p| p.kind == "base");
                    if group_level && on_base && matches!(s.primitive, Primitive::PutOn | Primitive::PutIn) {
                        *s = ActionStep::binary(Primitive::PutIn, &shared.id, s.target());
                        first_use.get_or_insert(i);
                    }
                }
                if let Some(i) = first_use {
                    let opened = steps[..i].iter().any(|s| s.primitive == Primitive::Open && s.target() == shared.id);
                    if shared.open == Some(false) && !opened {
                        steps.insert(i, ActionStep::unary(Primitive::Open, &shared.id));
                    }
                }
            }
        }
        if tags.contains("bed_sleep_only") {
            let avoid = &self.rules.avoid_base_label;
            // `steps[i]` is rewritten in place below
            #[allow(clippy::needless_range_loop)]
            for i in 0..steps.len() {
                let s = &steps[i];
                let Some(cat) = placeholder_category(s.target()) else { continue };
                let on_avoided = s.parent().and_then(|p| v.objects.get(p)).is_some_and(|p| &p.label == avoid);
                if !on_avoided || self.rules.sleep_categories.iter().any(|c| c == cat) {
                    continue;
                }
                if let Some(alt) = self.target_for(v, tags, i, cat) {
                    let prim = if alt.container { Primitive::PutIn } else { Primitive::PutOn };
                    steps[i] = ActionStep::binary(prim, &alt.id, &group_placeholder(cat));
                }
            }
        }
        for o in self.orientation_steps(v) {
            if !steps.contains(&o) {
                steps.push(o);
            }
        }
        steps
    }

    fn summarize(&self, v: &View) -> StagePayload {
        let t = &self.rules.summaries;
        let label = |id: &str| v.objects.get(id).map_or_else(|| id.replace('_', " "), ObjView::spoken);
        let plural_of = |id: &str| plural(&label(id));
        let is_base = |id: &str| v.objects.get(id).is_some_and(|o| o.kind == "base");
        let added: Vec<&ChangeView> = v.changes.iter().filter(|c| c.op == "added").collect();
        let removed: Vec<&ChangeView> = v.changes.iter().filter(|c| c.op == "removed").collect();

        let mut pick: Option<(&Template, Vec<(&str, String)>)> = None;
        if let Some(a) = added.iter().find(|a| {
            a.kind.is_some_and(RelationKind::is_support)
                && is_base(&a.parent)
                && removed.iter().any(|r| r.kind == Some(RelationKind::On) && r.child == a.child && !is_base(&r.parent))
        }) {
            let prep = if a.kind == Some(RelationKind::In) { "in" } else { "on" };
            pick = Some((
                &t.unstacked,
                alloc::vec![("child", plural_of(&a.child)), ("prep", prep.to_string()), ("base", label(&a.parent))],
            ));
        }
        if pick.is_none() {
            let avoided = |id: &str| v.objects.get(id).is_some_and(|o| o.label == self.rules.avoid_base_label);
            let sleepy = |id: &str| {
                let cat = v.objects.get(id).map_or_else(String::new, |o| self.rules.category_of(&o.label));
                self.rules.sleep_categories.contains(&cat)
            };
            if let Some((a, r)) = added
                .iter()
                .filter(|a| a.kind.is_some_and(RelationKind::is_support) && !sleepy(&a.child))
                .find_map(|a| removed.iter().find(|r| r.child == a.child && avoided(&r.parent)).map(|r| (a, r)))
            {
                pick = Some((
                    &t.vacated,
                    alloc::vec![("child", plural_of(&a.child)), ("base", label(&a.parent)), ("old", label(&r.parent))],
                ));
            }
        }
        if pick.is_none() {
            if let Some(a) = added.iter().find(|a| a.kind == Some(RelationKind::In)) {
                pick =
                    Some((&t.contained, alloc::vec![("child", plural_of(&a.child)), ("container", label(&a.parent))]));
            }
        }
        if pick.is_none() {
            if let Some(a) = added.iter().find(|a| a.kind == Some(RelationKind::On) && !is_base(&a.parent)) {
                pick = Some((&t.stacked, alloc::vec![("child", plural_of(&a.child)), ("parent", label(&a.parent))]));
            }
        }
        if pick.is_none() {
            if let Some(c) = v.changes.iter().find(|c| c.op == "state") {
                let tpl = if c.value { &t.opened } else { &t.closed };
                pick = Some((tpl, alloc::vec![("label", label(&c.child))]));
            }
        }
        if pick.is_none() {
            if let Some(a) = added.iter().find(|a| a.kind.is_some_and(|k| !k.is_support())) {
                let phrase = match a.kind {
                    Some(RelationKind::LeftOf) => "to the left of",
                    Some(RelationKind::RightOf) => "to the right of",
                    Some(RelationKind::FrontOf) => "in front of",
                    Some(RelationKind::Behind) => "behind",
                    _ => "next to",
                };
                pick = Some((
                    &t.related,
                    alloc::vec![
                        ("child", plural_of(&a.child)),
                        ("phrase", phrase.to_string()),
                        ("parent", label(&a.parent))
                    ],
                ));
            }
        }
        if pick.is_none() {
            if let Some(a) = added.iter().find(|a| a.kind == Some(RelationKind::On)) {
                pick = Some((&t.placed, alloc::vec![("child", plural_of(&a.child)), ("base", label(&a.parent))]));
            }
        }
        if pick.is_none() {
            if let Some(c) = v.changes.iter().find(|c| c.op == "pose") {
                pick = Some((&t.moved, alloc::vec![("label", label(&c.child))]));
            }
        }
        let (tpl, vars) = pick.unwrap_or((&t.fallback, Vec::new()));
        let text = fill(&tpl.text, &vars);
        let mut tags: BTreeSet<String> = tpl.tags.iter().cloned().collect();
        tags.extend(self.rules.tag_text(&text));
        StagePayload::Summary { text, tags: tags.into_iter().collect() }
    }

    fn profile(&self, v: &View) -> StagePayload {
        let mut records: Vec<(Vec<String>, u64, &str, &str)> = v
            .records
            .iter()
            .map(|(id, text)| {
                let tags: Vec<String> = self.rules.tag_text(text).into_iter().collect();
                let n = id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(u64::MAX);
                (tags, n, id.as_str(), text.as_str())
            })
            .collect();
        records.sort();
        let n = records.len();
        let chunks = n.div_ceil(3).max(1);
        let mut items = Vec::new();
        let mut start = 0;
        for k in 0..chunks {
            let size = n / chunks + usize::from(k < n % chunks);
            let chunk = &records[start..start + size];
            start += size;
            if chunk.is_empty() {
                continue;
            }
            let tags: BTreeSet<&String> = chunk.iter().flat_map(|r| r.0.iter()).collect();
            let sentences: Vec<&str> =
                tags.iter().filter_map(|t| self.rules.profile_templates.get(*t)).map(String::as_str).collect();
            let text = if sentences.is_empty() {
                let shortest = chunk.iter().map(|r| r.3).min_by_key(|t| (t.len(), *t)).unwrap_or("");
                fill(&self.rules.profile_fallback, &[("text", lower_first(shortest))])
            } else {
                sentences.join(" ")
            };
            items.push(ProfileItem { parents: chunk.iter().map(|r| r.2.to_string()).collect(), text });
        }
        StagePayload::Profile(items)
    }
}

impl PlannerBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete_raw(&self, bundle: &PromptBundle) -> Result<RawCompletion, BackendError> {
        let text = bundle.text();
        let raw = self.respond(&text);
        let usage = Usage { prompt_tokens: estimate_tokens(&text), completion_tokens: estimate_tokens(&raw) };
        Ok(RawCompletion { raw, usage })
    }
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) if !s.starts_with("I ") => f.to_lowercase().chain(c).collect(),
        _ => s.to_string(),
    }
}

/// English plural for the common cases.
const MAX_STACK: usize = 3;

/// Follows `put_on`/`put_in` steps down from `id` to the first object that
/// does not sit on another movable object.
fn stack_root(steps: &[ActionStep], id: &str, v: &View) -> String {
    let mut cur = id.to_string();
    for _ in 0..steps.len() {
        let below = steps.iter().find_map(|s| {
            let stacked = matches!(s.primitive, Primitive::PutOn | Primitive::PutIn) && s.target() == cur;
            stacked.then(|| s.parent()).flatten().filter(|p| v.objects.get(*p).is_some_and(|o| o.kind != "base"))
        });
        match below {
            Some(p) => cur = p.to_string(),
            None => break,
        }
    }
    cur
}

pub fn plural(word: &str) -> String {
    let w = word.trim();
    if w.ends_with('s') || w.ends_with('x') || w.ends_with("ch") || w.ends_with("sh") {
        return format!("{w}es");
    }
    if let Some(stem) = w.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            return format!("{stem}ies");
        }
    }
    format!("{w}s")
}

/// Byte offset of the first word-boundary match.
fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let bytes = haystack.as_bytes();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(word) {
        let i = start + pos;
        let j = i + word.len();
        let left = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        if left && word_ends(bytes, j) {
            return Some(i);
        }
        start = i + 1;
    }
    None
}

/// Labels taken round-robin so equal labels end up apart.
fn interleave_labels<'v>(objs: &[&'v ObjView]) -> Vec<&'v ObjView> {
    let mut by_label: BTreeMap<&str, Vec<&'v ObjView>> = BTreeMap::new();
    for o in objs {
        by_label.entry(o.label.as_str()).or_default().push(o);
    }
    let mut queues: Vec<Vec<&'v ObjView>> = by_label
        .into_values()
        .map(|mut v| {
            v.reverse();
            v
        })
        .collect();
    queues.sort_by_key(|q| core::cmp::Reverse(q.len()));
    let mut out = Vec::with_capacity(objs.len());
    while out.len() < objs.len() {
        for q in queues.iter_mut() {
            if let Some(o) = q.pop() {
                out.push(o);
            }
        }
    }
    out
}

// ---- prompt view --------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct ObjView {
    id: String,
    label: String,
    kind: String,
    container: bool,
    open: Option<bool>,
}

impl ObjView {
    fn spoken(&self) -> String {
        self.label.replace('_', " ")
    }
}

#[derive(Debug, Clone, Default)]
struct EventView {
    /// Failure code for physical events; `None` for text events.
    code: Option<String>,
    step: Option<usize>,
    objects: Vec<String>,
    text: String,
}

#[derive(Debug, Clone, Default)]
struct ChangeView {
    op: String,
    kind: Option<RelationKind>,
    parent: String,
    child: String,
    value: bool,
}

#[derive(Debug, Default)]
struct View {
    stage: Option<Stage>,
    objects: BTreeMap<String, ObjView>,
    instruction: String,
    preferences: Vec<String>,
    events: Vec<EventView>,
    groups: Vec<(String, Vec<String>)>,
    plan: Vec<ActionStep>,
    input: Vec<String>,
    changes: Vec<ChangeView>,
    records: Vec<(String, String)>,
}

fn parse_relation(s: &str) -> Option<(RelationKind, String, String)> {
    let open = s.find('(')?;
    let close = s.find(')')?;
    let kind = RelationKind::parse(s[..open].trim())?;
    let (p, c) = s[open + 1..close].split_once(',')?;
    Some((kind, p.trim().to_string(), c.trim().to_string()))
}

impl View {
    fn parse(prompt: &str) -> Self {
        let mut v = View::default();
        let mut section = "";
        for line in prompt.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
                section = match trimmed {
                    "[SCENE]" => "scene",
                    "[INSTRUCTION]" => "instruction",
                    "[PREFERENCES]" => "preferences",
                    "[FEEDBACK]" => "feedback",
                    "[GROUPS]" => "groups",
                    "[PLAN]" => "plan",
                    "[INPUT]" => "input",
                    _ => "other",
                };
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            match section {
                "" => {
                    if let Some(s) = trimmed.strip_prefix("STAGE:") {
                        v.stage = Stage::parse(s.trim());
                    }
                }
                "scene" => v.scene_line(trimmed),
                "instruction" => {
                    if !v.instruction.is_empty() {
                        v.instruction.push(' ');
                    }
                    v.instruction.push_str(trimmed);
                }
                "preferences" => {
                    if let Some((_, text)) = trimmed.split_once("): ") {
                        v.preferences.push(text.to_string());
                    }
                }
                "feedback" => v.feedback_line(line),
                "groups" => {
                    if let Some((cat, members)) = trimmed.split_once(':') {
                        let members =
                            members.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
                        v.groups.push((cat.trim().to_string(), members));
                    }
                }
                "plan" => {
                    if let Ok(step) = super::parse_step_line(1, trimmed) {
                        v.plan.push(step);
                    }
                }
                "input" => v.input_line(trimmed),
                _ => {}
            }
        }
        v
    }

    fn scene_line(&mut self, line: &str) {
        let Some(rest) = line.strip_prefix("object ") else { return };
        let Some((id, attrs)) = rest.split_once(": ") else { return };
        let mut o = ObjView { id: id.to_string(), ..ObjView::default() };
        for kv in attrs.split(", ") {
            let Some((k, val)) = kv.split_once('=') else { continue };
            match k {
                "label" => o.label = val.to_string(),
                "type" => o.kind = val.to_string(),
                "container" => o.container = val == "true",
                "open" => o.open = Some(val == "true"),
                _ => {}
            }
        }
        if o.kind == "container" {
            o.container = true;
        }
        self.objects.insert(o.id.clone(), o);
    }

    fn feedback_line(&mut self, line: &str) {
        if line.starts_with(' ') {
            return;
        }
        let Some(rest) = line.strip_prefix("event ") else { return };
        let Some((head, body)) = rest.split_once(": ") else { return };
        let kind = head.split_whitespace().next().unwrap_or("");
        if matches!(kind, "instruction" | "adjustment") {
            self.events.push(EventView { text: body.to_string(), ..EventView::default() });
            return;
        }
        let (body, objects) = match body.split_once(" involving ") {
            Some((b, ids)) => (b, ids.split(", ").map(str::to_string).collect()),
            None => (body, Vec::new()),
        };
        let (code, step) = match body.split_once(" at step ") {
            Some((c, s)) => (c, s.trim().parse().ok()),
            None => (body, None),
        };
        self.events.push(EventView { code: Some(code.trim().to_string()), step, objects, text: String::new() });
    }

    fn input_line(&mut self, line: &str) {
        self.input.push(line.to_string());
        if let Some(rest) = line.strip_prefix("record ") {
            if let Some((id, text)) = rest.split_once(": ") {
                self.records.push((id.to_string(), text.to_string()));
            }
            return;
        }
        let Some(rest) = line.strip_prefix("change ") else { return };
        let (op, body) = rest.split_once(' ').unwrap_or((rest, ""));
        let mut c = ChangeView { op: op.to_string(), ..ChangeView::default() };
        match op {
            "added" | "removed" => {
                let Some((kind, p, ch)) = parse_relation(body) else { return };
                c.kind = Some(kind);
                c.parent = p;
                c.child = ch;
            }
            "state" => {
                let Some((id, kv)) = body.split_once(' ') else { return };
                c.child = id.to_string();
                c.value = kv.ends_with("=true");
            }
            "pose" => c.child = body.trim().to_string(),
            _ => return,
        }
        self.changes.push(c);
    }
}
