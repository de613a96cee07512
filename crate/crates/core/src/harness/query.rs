//! Referring queries over synthetic scenes and the task generators that
//! produce scenes in which each query kind is answerable.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{fits, place_random, render_scene, Scene, SceneObject, SceneSpec};
use crate::projector::SvpPlan;
use crate::{Error, Result};

/// Minimum centroid separation, in patches, for positional answers.
pub const POSITION_MARGIN: f64 = 1.0;
/// Minimum area ratio between the answer and the runner-up for size queries.
pub const SIZE_RATIO: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryKind {
    Attribute,
    AbsolutePosition,
    RelativePosition,
    RelativeSize,
    Context,
}

impl QueryKind {
    pub const ALL: [QueryKind; 5] = [
        QueryKind::Attribute,
        QueryKind::AbsolutePosition,
        QueryKind::RelativePosition,
        QueryKind::RelativeSize,
        QueryKind::Context,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::Attribute => "attribute",
            QueryKind::AbsolutePosition => "absolute_position",
            QueryKind::RelativePosition => "relative_position",
            QueryKind::RelativeSize => "relative_size",
            QueryKind::Context => "context",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown query kind {s:?}")))
    }

    /// Kinds that can only be answered from where the objects are.
    pub fn is_positional(self) -> bool {
        matches!(self, QueryKind::AbsolutePosition | QueryKind::RelativePosition)
    }

    pub fn relations(self) -> &'static [Relation] {
        use Relation::*;
        match self {
            QueryKind::Attribute => &[],
            QueryKind::AbsolutePosition => &[Leftmost, Rightmost, Topmost, Bottommost],
            QueryKind::RelativePosition => &[LeftOf, RightOf, Above, Below],
            QueryKind::RelativeSize => &[Larger, Smaller],
            QueryKind::Context => &[NextTo],
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    LeftOf,
    RightOf,
    Above,
    Below,
    Larger,
    Smaller,
    NextTo,
}

impl Relation {
    pub const COUNT: usize = 11;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            Relation::LeftOf | Relation::RightOf | Relation::Above | Relation::Below | Relation::NextTo
        )
    }
}

/// "The `<attribute>` `<category>` [that is `<relation>` [the `<reference>`]]".
#[derive(Clone, Debug, PartialEq)]
pub struct ReferringQuery {
    pub kind: QueryKind,
    pub category: usize,
    pub attribute: usize,
    pub relation: Option<Relation>,
    /// Category of the reference object.
    pub reference: Option<usize>,
    /// Object index of the unique answer.
    pub target: usize,
}

impl ReferringQuery {
    pub fn encoding_dim(spec: &SceneSpec) -> usize {
        2 * spec.categories + spec.attributes + Relation::COUNT
    }

    /// Concatenated one-hots: category, attribute, relation, reference
    /// category (all-zero blocks when absent).
    pub fn encode(&self, spec: &SceneSpec) -> Vec<f64> {
        let (c, a) = (spec.categories, spec.attributes);
        let mut v = vec![0.0; Self::encoding_dim(spec)];
        v[self.category] = 1.0;
        v[c + self.attribute] = 1.0;
        if let Some(r) = self.relation {
            v[c + a + r.index()] = 1.0;
        }
        if let Some(rc) = self.reference {
            v[c + a + Relation::COUNT + rc] = 1.0;
        }
        v
    }
}

fn matching(scene: &Scene, cat: usize, attr: usize) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|&i| scene.objects[i].category == cat && scene.objects[i].attribute == attr)
        .collect()
}

/// Index of the unique best under `key` (smaller is better), if it beats the
/// runner-up by at least `margin`.
fn unique_min(ids: &[usize], key: impl Fn(usize) -> f64, margin: f64) -> Option<usize> {
    let mut v: Vec<(f64, usize)> = ids.iter().map(|&i| (key(i), i)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    match v.as_slice() {
        [(best, i), (next, _), ..] if next - best >= margin => Some(*i),
        _ => None,
    }
}

/// The object the query denotes, or `None` if no object or several do.
pub fn resolve(
    scene: &Scene,
    kind: QueryKind,
    cat: usize,
    attr: usize,
    relation: Option<Relation>,
    reference: Option<usize>,
) -> Option<usize> {
    let ids = matching(scene, cat, attr);
    let centroid = |i: usize| scene.objects[i].centroid();
    let area = |i: usize| scene.objects[i].area() as f64;
    if kind == QueryKind::Attribute {
        return (ids.len() == 1 && relation.is_none() && reference.is_none()).then(|| ids[0]);
    }
    if ids.len() < 2 || !relation.is_some_and(|r| kind.relations().contains(&r)) {
        return None;
    }
    let relation = relation?;
    if relation.needs_reference() != reference.is_some() || reference == Some(cat) {
        return None;
    }
    match relation {
        Relation::Leftmost => unique_min(&ids, |i| centroid(i).1, POSITION_MARGIN),
        Relation::Rightmost => unique_min(&ids, |i| -centroid(i).1, POSITION_MARGIN),
        Relation::Topmost => unique_min(&ids, |i| centroid(i).0, POSITION_MARGIN),
        Relation::Bottommost => unique_min(&ids, |i| -centroid(i).0, POSITION_MARGIN),
        Relation::Larger => unique_min(&ids, |i| -area(i).ln(), SIZE_RATIO.ln()),
        Relation::Smaller => unique_min(&ids, |i| area(i).ln(), SIZE_RATIO.ln()),
        Relation::LeftOf | Relation::RightOf | Relation::Above | Relation::Below => {
            let rc = reference?;
            let refs: Vec<usize> = (0..scene.objects.len())
                .filter(|&i| scene.objects[i].category == rc)
                .collect();
            let [r] = refs[..] else { return None };
            let (rr, rcol) = centroid(r);
            // Signed offset towards the named side.
            let side = |i: usize| {
                let (y, x) = centroid(i);
                match relation {
                    Relation::LeftOf => rcol - x,
                    Relation::RightOf => x - rcol,
                    Relation::Above => rr - y,
                    _ => y - rr,
                }
            };
            let yes: Vec<usize> = ids.iter().copied().filter(|&i| side(i) >= POSITION_MARGIN).collect();
            let all_others_opposite = ids
                .iter()
                .all(|&i| yes.contains(&i) || side(i) <= -POSITION_MARGIN);
            (yes.len() == 1 && all_others_opposite).then(|| yes[0])
        }
        Relation::NextTo => {
            let rc = reference?;
            let next = |i: usize| {
                scene
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && o.category == rc && scene.objects[i].touches(o))
            };
            let yes: Vec<usize> = ids.iter().copied().filter(|&i| next(i)).collect();
            (yes.len() == 1).then(|| yes[0])
        }
    }
}

/// A uniformly chosen answerable query of `kind` in `scene`.
pub fn gen_query(scene: &Scene, kind: QueryKind, seed: u64) -> Result<ReferringQuery> {
    let spec = &scene.spec;
    let mut options = Vec::new();
    let mut combos: Vec<(usize, usize)> = scene.objects.iter().map(|o| (o.category, o.attribute)).collect();
    combos.sort_unstable();
    combos.dedup();
    for &(c, a) in &combos {
        if kind == QueryKind::Attribute {
            if let Some(t) = resolve(scene, kind, c, a, None, None) {
                options.push(ReferringQuery {
                    kind,
                    category: c,
                    attribute: a,
                    relation: None,
                    reference: None,
                    target: t,
                });
            }
            continue;
        }
        for &r in kind.relations() {
            let refs: Vec<Option<usize>> = if r.needs_reference() {
                (0..spec.categories).filter(|&rc| rc != c).map(Some).collect()
            } else {
                vec![None]
            };
            for rc in refs {
                if let Some(t) = resolve(scene, kind, c, a, Some(r), rc) {
                    options.push(ReferringQuery {
                        kind,
                        category: c,
                        attribute: a,
                        relation: Some(r),
                        reference: rc,
                        target: t,
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    options
        .choose(&mut rng)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("scene has no answerable {kind} query")))
}

/// Token index of object `target` under `plan` (superpixel whose patches
/// carry its label).
pub fn target_token(scene: &Scene, plan: &SvpPlan, target: usize) -> Result<usize> {
    let want = target + 1;
    plan.aligned
        .supports()
        .iter()
        .position(|sup| {
            let hits = sup.iter().filter(|&&p| scene.patch_labels[p] == want).count();
            2 * hits > sup.len()
        })
        .ok_or_else(|| Error::invalid(format!("object {target} has no token")))
}

fn other_category(rng: &mut impl Rng, spec: &SceneSpec, not: &[usize]) -> Option<usize> {
    let free: Vec<usize> = (0..spec.categories).filter(|c| !not.contains(c)).collect();
    free.choose(rng).copied()
}

/// Places a `h × w` rectangle touching `anchor` and clear of `others`.
fn place_touching(
    rng: &mut impl Rng,
    spec: &SceneSpec,
    anchor: &SceneObject,
    others: &[SceneObject],
    cat: usize,
    attr: usize,
    (h, w): (usize, usize),
) -> Option<SceneObject> {
    let (r0, c0, r1, c1) = anchor.bbox();
    let (r0, c0, r1, c1) = (r0 as i64, c0 as i64, r1 as i64, c1 as i64);
    let (h, w) = (h as i64, w as i64);
    for _ in 0..100 {
        let (top, left) = match rng.random_range(0..4) {
            0 => (rng.random_range(r0 - h + 1..=r1), c1 + 1),
            1 => (rng.random_range(r0 - h + 1..=r1), c0 - w),
            2 => (r1 + 1, rng.random_range(c0 - w + 1..=c1)),
            _ => (r0 - h, rng.random_range(c0 - w + 1..=c1)),
        };
        if top < 0 || left < 0 || top + h > spec.grid_h as i64 || left + w > spec.grid_w as i64 {
            continue;
        }
        let o = SceneObject::rect(cat, attr, top as usize, left as usize, h as usize, w as usize);
        if o.touches(anchor) && fits(&o, std::slice::from_ref(anchor), false) && fits(&o, others, true) {
            return Some(o);
        }
    }
    None
}

fn side(rng: &mut impl Rng, spec: &SceneSpec) -> usize {
    rng.random_range(spec.min_side..=spec.max_side)
}

fn layout(rng: &mut impl Rng, spec: &SceneSpec, kind: QueryKind) -> Option<Vec<SceneObject>> {
    let ncat = spec.categories;
    let nattr = spec.attributes;
    let c = rng.random_range(0..ncat);
    let a = rng.random_range(0..nattr);
    let mut objs: Vec<SceneObject> = Vec::new();
    match kind {
        QueryKind::Attribute => {
            // Target plus a same-category and a same-attribute distractor.
            let a2 = (a + 1 + rng_index(rng, nattr - 1)) % nattr;
            let c2 = (c + 1 + rng_index(rng, ncat - 1)) % ncat;
            let shapes: Vec<(usize, usize, usize)> = vec![(c, a, 0), (c, a2, 0), (c2, a, 0)];
            for (cat, attr, _) in shapes {
                let hw = (side(rng, spec), side(rng, spec));
                let blob = rng.random_bool(0.5);
                add(rng, spec, &mut objs, cat, attr, hw, blob)?;
            }
            if rng.random_bool(0.5) {
                let hw = (side(rng, spec), side(rng, spec));
                let (cat, attr) = (rng.random_range(0..ncat), rng.random_range(0..nattr));
                add(rng, spec, &mut objs, cat, attr, hw, false)?;
            }
        }
        QueryKind::AbsolutePosition | QueryKind::RelativePosition | QueryKind::Context => {
            // Identical twins, distinguishable only by where they are.
            let hw = (side(rng, spec), side(rng, spec));
            let twins = if kind == QueryKind::AbsolutePosition { rng.random_range(2..=3) } else { 2 };
            match kind {
                QueryKind::Context => {
                    let cz = other_category(rng, spec, &[c])?;
                    let cd = other_category(rng, spec, &[c, cz])?;
                    add(rng, spec, &mut objs, c, a, hw, false)?;
                    let zhw = (side(rng, spec), side(rng, spec));
                    let attr2 = rng.random_range(0..nattr);
                    let z = place_touching(rng, spec, &objs[0], &[], cz, attr2, zhw)?;
                    objs.push(z);
                    add(rng, spec, &mut objs, c, a, hw, false)?;
                    let dhw = (side(rng, spec), side(rng, spec));
                    let others = vec![objs[0].clone(), objs[1].clone()];
                    let attr2 = rng.random_range(0..nattr);
                    let d = place_touching(rng, spec, &objs[2], &others, cd, attr2, dhw)?;
                    objs.push(d);
                }
                _ => {
                    for _ in 0..twins {
                        add(rng, spec, &mut objs, c, a, hw, false)?;
                    }
                    let cat = other_category(rng, spec, &[c])?;
                    let dhw = (side(rng, spec), side(rng, spec));
                    let blob = rng.random_bool(0.5);
                    let attr2 = rng.random_range(0..nattr);
                    add(rng, spec, &mut objs, cat, attr2, dhw, blob)?;
                }
            }
        }
        QueryKind::RelativeSize => {
            let small = spec.min_side;
            let big = spec.max_side;
            add(rng, spec, &mut objs, c, a, (small, small), false)?;
            add(rng, spec, &mut objs, c, a, (big, big), false)?;
            let cat = other_category(rng, spec, &[c])?;
            let dhw = (side(rng, spec), side(rng, spec));
            let attr2 = rng.random_range(0..nattr);
            add(rng, spec, &mut objs, cat, attr2, dhw, false)?;
        }
    }
    Some(objs)
}

#[allow(clippy::too_many_arguments)]
fn add(
    rng: &mut impl Rng,
    spec: &SceneSpec,
    objs: &mut Vec<SceneObject>,
    cat: usize,
    attr: usize,
    hw: (usize, usize),
    blob: bool,
) -> Option<()> {
    let o = place_random(rng, spec, objs, cat, attr, hw, blob, true)?;
    objs.push(o);
    Some(())
}

fn rng_index(rng: &mut impl Rng, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        rng.random_range(0..n)
    }
}

/// A scene built for `kind` together with an answerable query for it.
pub fn gen_task(seed: u64, kind: QueryKind, spec: &SceneSpec) -> Result<(Scene, ReferringQuery)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let Some(objs) = layout(&mut rng, spec, kind) else { continue };
        let scene = render_scene(spec, objs, rng.random())?;
        if let Ok(q) = gen_query(&scene, kind, rng.random()) {
            return Ok((scene, q));
        }
    }
    Err(Error::invalid(format!("could not lay out a {kind} task on this grid")))
}
