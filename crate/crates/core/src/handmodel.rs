//! Kinematic chains, forward kinematics and fingertip Jacobians.
//!
//! A chain is described by a TOML model file whose fields mirror
//! [`ChainDescription`]. Joint declaration order defines the layout of the
//! configuration vector: the `d`-th non-fixed joint in the file owns `q[d]`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

const AXIS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    /// Pose of the joint frame in the parent link frame.
    #[serde(default)]
    pub origin: RigidTransform,
    /// Unit axis in the joint frame.
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    #[serde(default = "neg_inf")]
    pub limit_lo: f64,
    #[serde(default = "pos_inf")]
    pub limit_hi: f64,
}

impl Joint {
    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis)
    }

    fn motion(&self, value: f64) -> RigidTransform {
        match self.kind {
            JointKind::Revolute => RigidTransform::from_axis_angle(&self.axis(), value),
            JointKind::Prismatic => RigidTransform::from_translation(self.axis() * value),
            JointKind::Fixed => RigidTransform::identity(),
        }
    }
}

/// Serialized form of a chain; this is exactly the model-file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDescription {
    #[serde(default)]
    pub name: String,
    pub links: Vec<String>,
    pub joints: Vec<Joint>,
    pub fingertip_links: Vec<String>,
    /// Link used as the hand root / palm center for placement metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palm_link: Option<String>,
}

/// A validated tree of links and joints.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    desc: ChainDescription,
    link_ids: HashMap<String, usize>,
    base: usize,
    /// Joint whose child is this link, by link index.
    parent_joint: Vec<Option<usize>>,
    joint_parent: Vec<usize>,
    joint_child: Vec<usize>,
    /// Joints ordered so that every parent is processed before its children.
    topo: Vec<usize>,
    dof_of_joint: Vec<Option<usize>>,
    dof_joints: Vec<usize>,
    fingertips: Vec<usize>,
    palm: usize,
}

impl KinematicChain {
    pub fn new(desc: ChainDescription) -> Result<Self> {
        let mut link_ids = HashMap::new();
        for (i, l) in desc.links.iter().enumerate() {
            if link_ids.insert(l.clone(), i).is_some() {
                return Err(Error::invalid("links", format!("duplicate link `{l}`")));
            }
        }
        let lookup = |name: &str| link_ids.get(name).copied().ok_or_else(|| Error::UnknownLink(name.to_string()));

        let n_links = desc.links.len();
        let mut parent_joint: Vec<Option<usize>> = vec![None; n_links];
        let mut joint_parent = Vec::with_capacity(desc.joints.len());
        let mut joint_child = Vec::with_capacity(desc.joints.len());
        let mut dof_of_joint = Vec::with_capacity(desc.joints.len());
        let mut dof_joints = Vec::new();
        let mut joint_names = HashMap::new();
        for (j, joint) in desc.joints.iter().enumerate() {
            if joint_names.insert(joint.name.as_str(), j).is_some() {
                return Err(Error::invalid("joints", format!("duplicate joint `{}`", joint.name)));
            }
            let p = lookup(&joint.parent)?;
            let c = lookup(&joint.child)?;
            if p == c {
                return Err(Error::Cycle(joint.child.clone()));
            }
            if let Some(prev) = parent_joint[c] {
                return Err(Error::NotATree(format!(
                    "link `{}` is the child of both `{}` and `{}`",
                    joint.child, desc.joints[prev].name, joint.name
                )));
            }
            parent_joint[c] = Some(j);
            joint_parent.push(p);
            joint_child.push(c);

            let axis = joint.axis();
            if !axis.iter().all(|v| v.is_finite()) || (axis.norm() - 1.0).abs() > AXIS_TOL {
                return Err(Error::invalid(
                    format!("joints.{}.axis", joint.name),
                    format!("axis must have unit norm, got {:.12}", axis.norm()),
                ));
            }
            if joint.limit_lo.is_nan() || joint.limit_hi.is_nan() || joint.limit_lo > joint.limit_hi {
                return Err(Error::invalid(
                    format!("joints.{}.limit", joint.name),
                    format!("limit_lo {} > limit_hi {}", joint.limit_lo, joint.limit_hi),
                ));
            }
            if joint.kind == JointKind::Fixed {
                dof_of_joint.push(None);
            } else {
                dof_of_joint.push(Some(dof_joints.len()));
                dof_joints.push(j);
            }
        }

        let roots: Vec<usize> = (0..n_links).filter(|&l| parent_joint[l].is_none()).collect();
        let base = match roots.as_slice() {
            [single] => *single,
            [] => {
                let name = desc.links.first().cloned().unwrap_or_default();
                return Err(Error::Cycle(name));
            }
            many => {
                let names: Vec<&str> = many.iter().map(|&l| desc.links[l].as_str()).collect();
                return Err(Error::NotATree(format!("multiple root links: {}", names.join(", "))));
            }
        };

        // Breadth-first from the base; links never reached sit on a cycle,
        // since every one of them has a parent.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_links];
        for (j, &p) in joint_parent.iter().enumerate() {
            children[p].push(j);
        }
        let mut topo = Vec::with_capacity(desc.joints.len());
        let mut frontier = vec![base];
        let mut reached = vec![false; n_links];
        reached[base] = true;
        while let Some(link) = frontier.pop() {
            for &j in &children[link] {
                let c = joint_child[j];
                reached[c] = true;
                topo.push(j);
                frontier.push(c);
            }
        }
        if let Some(l) = reached.iter().position(|r| !r) {
            return Err(Error::Cycle(desc.links[l].clone()));
        }

        let fingertips = desc
            .fingertip_links
            .iter()
            .map(|l| lookup(l))
            .collect::<Result<Vec<_>>>()?;
        let palm = match &desc.palm_link {
            Some(l) => lookup(l)?,
            None => base,
        };

        Ok(Self {
            desc,
            link_ids,
            base,
            parent_joint,
            joint_parent,
            joint_child,
            topo,
            dof_of_joint,
            dof_joints,
            fingertips,
            palm,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let desc: ChainDescription =
            toml::from_str(text).map_err(|e| Error::parse("hand model", e.to_string()))?;
        Self::new(desc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.desc).expect("chain description serializes")
    }

    pub fn description(&self) -> &ChainDescription {
        &self.desc
    }

    pub fn name(&self) -> &str {
        &self.desc.name
    }

    /// Number of non-fixed joints.
    pub fn dof(&self) -> usize {
        self.dof_joints.len()
    }

    pub fn links(&self) -> &[String] {
        &self.desc.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.desc.joints
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.link_ids.get(name).copied()
    }

    pub fn base_link(&self) -> &str {
        &self.desc.links[self.base]
    }

    pub fn palm_link_index(&self) -> usize {
        self.palm
    }

    pub fn fingertip_links(&self) -> &[String] {
        &self.desc.fingertip_links
    }

    pub fn fingertip_count(&self) -> usize {
        self.fingertips.len()
    }

    /// The joint owning configuration entry `d`.
    pub fn dof_joint(&self, d: usize) -> &Joint {
        &self.desc.joints[self.dof_joints[d]]
    }

    pub fn lower_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.dof_joints.iter().map(|&j| self.desc.joints[j].limit_lo))
    }

    pub fn upper_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.dof_joints.iter().map(|&j| self.desc.joints[j].limit_hi))
    }

    /// Sum of joint-origin offsets; a Lipschitz bound for fingertip motion
    /// under revolute joints on chains of this size.
    pub fn total_link_length(&self) -> f64 {
        self.desc.joints.iter().map(|j| j.origin.translation().norm()).sum()
    }

    fn check_dof(&self, q: &HandConfiguration) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Dimension {
                what: "hand configuration",
                expected: self.dof(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    /// World pose of every link, indexed like [`KinematicChain::links`].
    pub fn forward_kinematics(&self, q: &HandConfiguration) -> Result<LinkPoses<'_>> {
        self.check_dof(q)?;
        let mut poses = vec![RigidTransform::identity(); self.desc.links.len()];
        for &j in &self.topo {
            let joint = &self.desc.joints[j];
            let value = self.dof_of_joint[j].map_or(0.0, |d| q[d]);
            let parent = poses[self.joint_parent[j]];
            poses[self.joint_child[j]] = parent.compose(&joint.origin).compose(&joint.motion(value));
        }
        Ok(LinkPoses { chain: self, poses })
    }

    pub fn fingertip_positions(&self, q: &HandConfiguration) -> Result<Vec<Vector3<f64>>> {
        let fk = self.forward_kinematics(q)?;
        Ok(self.fingertips.iter().map(|&l| *fk.poses[l].translation()).collect())
    }

    /// 3×D world-frame position Jacobian of fingertip `i`.
    pub fn fingertip_jacobian(&self, q: &HandConfiguration, i: usize) -> Result<DMatrix<f64>> {
        let link = *self.fingertips.get(i).ok_or(Error::OutOfRange {
            index: i,
            len: self.fingertips.len(),
        })?;
        let fk = self.forward_kinematics(q)?;
        Ok(self.link_jacobian(&fk, link))
    }

    /// Jacobians of all fingertips from a single FK pass.
    pub fn fingertip_jacobians(&self, q: &HandConfiguration) -> Result<(Vec<Vector3<f64>>, Vec<DMatrix<f64>>)> {
        let fk = self.forward_kinematics(q)?;
        let pos = self.fingertips.iter().map(|&l| *fk.poses[l].translation()).collect();
        let jac = self.fingertips.iter().map(|&l| self.link_jacobian(&fk, l)).collect();
        Ok((pos, jac))
    }

    /// Position Jacobian of the origin of `link` given a precomputed FK pass.
    pub fn link_jacobian(&self, fk: &LinkPoses<'_>, link: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(3, self.dof());
        let target = *fk.poses[link].translation();
        let mut cursor = link;
        while let Some(j) = self.parent_joint[cursor] {
            if let Some(d) = self.dof_of_joint[j] {
                let joint = &self.desc.joints[j];
                let frame = fk.poses[self.joint_parent[j]].compose(&joint.origin);
                let axis = frame.apply_vector(&joint.axis());
                let col = match joint.kind {
                    JointKind::Revolute => axis.cross(&(target - frame.translation())),
                    JointKind::Prismatic => axis,
                    JointKind::Fixed => unreachable!("fixed joints own no dof"),
                };
                jac.fixed_view_mut::<3, 1>(0, d).copy_from(&col);
            }
            cursor = self.joint_parent[j];
        }
        jac
    }

    /// Componentwise clamp into `[limit_lo, limit_hi]`.
    pub fn clamp_to_limits(&self, q: &HandConfiguration) -> Result<HandConfiguration> {
        self.check_dof(q)?;
        let lo = self.lower_limits();
        let hi = self.upper_limits();
        Ok(HandConfiguration(DVector::from_fn(self.dof(), |d, _| {
            q[d].max(lo[d]).min(hi[d])
        })))
    }

    pub fn within_limits(&self, q: &HandConfiguration) -> bool {
        q.len() == self.dof()
            && (0..self.dof()).all(|d| {
                let j = self.dof_joint(d);
                q[d] >= j.limit_lo && q[d] <= j.limit_hi
            })
    }
}

pub fn load_chain(path: impl AsRef<Path>) -> Result<KinematicChain> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KinematicChain::from_toml_str(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

/// Result of a forward-kinematics pass.
#[derive(Debug, Clone)]
pub struct LinkPoses<'a> {
    chain: &'a KinematicChain,
    poses: Vec<RigidTransform>,
}

impl LinkPoses<'_> {
    pub fn get(&self, link: &str) -> Option<&RigidTransform> {
        self.chain.link_index(link).map(|i| &self.poses[i])
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RigidTransform)> {
        self.chain.links().iter().map(String::as_str).zip(self.poses.iter())
    }
}

/// Joint values in chain order: radians for revolute, meters for prismatic.
#[derive(Debug, Clone, PartialEq)]
pub struct HandConfiguration(pub DVector<f64>);

impl HandConfiguration {
    pub fn zeros(dof: usize) -> Self {
        Self(DVector::zeros(dof))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl std::ops::Index<usize> for HandConfiguration {
    type Output = f64;

    fn index(&self, d: usize) -> &f64 {
        &self.0[d]
    }
}

impl From<DVector<f64>> for HandConfiguration {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// A non-empty sequence of configurations sharing one dof.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrajectory {
    frames: Vec<HandConfiguration>,
    dof: usize,
}

impl HandTrajectory {
    pub fn new(frames: Vec<HandConfiguration>) -> Result<Self> {
        let dof = frames
            .first()
            .map(HandConfiguration::len)
            .ok_or_else(|| Error::invalid("hand trajectory", "no frames"))?;
        if let Some(bad) = frames.iter().find(|f| f.len() != dof) {
            return Err(Error::Dimension {
                what: "trajectory frame",
                expected: dof,
                actual: bad.len(),
            });
        }
        Ok(Self { frames, dof })
    }

    pub fn frames(&self) -> &[HandConfiguration] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<HandConfiguration> {
        self.frames
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn check_chain(&self, chain: &KinematicChain) -> Result<()> {
        if self.dof != chain.dof() {
            return Err(Error::Dimension {
                what: "trajectory dof",
                expected: chain.dof(),
                actual: self.dof,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::models;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn one_dof_demo() {
        let chain = models::one_dof();
        assert_eq!(chain.dof(), 1);
        let tip = chain.fingertip_positions(&HandConfiguration::zeros(1)).unwrap();
        assert!((tip[0] - Vector3::new(models::ONE_DOF_LENGTH, 0.0, 0.0)).norm() < 1e-15);
        let tip = chain.fingertip_positions(&HandConfiguration::from_slice(&[FRAC_PI_2])).unwrap();
        assert!((tip[0] - Vector3::new(0.0, models::ONE_DOF_LENGTH, 0.0)).norm() < 1e-15);
        let jac = chain.fingertip_jacobian(&HandConfiguration::zeros(1), 0).unwrap();
        assert!((jac.column(0) - Vector3::new(0.0, models::ONE_DOF_LENGTH, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn planar_two_link_fk() {
        let chain = models::planar_two_link();
        let (l1, l2) = models::PLANAR_LENGTHS;
        let tip = chain
            .fingertip_positions(&HandConfiguration::from_slice(&[FRAC_PI_2, FRAC_PI_2]))
            .unwrap();
        assert!((tip[0] - Vector3::new(-l2, l1, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn prismatic_column_is_axis() {
        let chain = models::panda_gripper();
        let jac = chain.fingertip_jacobian(&HandConfiguration::from_slice(&[0.01]), 0).unwrap();
        assert!((jac.column(0) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn demo_counts() {
        let hand = models::hand20();
        assert_eq!(hand.dof(), 20);
        assert_eq!(hand.fingertip_count(), 5);
        assert_eq!(models::gripper3().fingertip_count(), 3);
    }

    #[test]
    fn demo_models_round_trip_through_toml() {
        for chain in [models::one_dof(), models::planar_two_link(), models::gripper3(), models::hand20()] {
            let again = KinematicChain::from_toml_str(&chain.to_toml_string()).unwrap();
            assert_eq!(again.description(), chain.description());
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let text = r#"
links = ["base", "a", "b"]
fingertip_links = ["b"]
[[joints]]
name = "j0"
type = "revolute"
parent = "a"
child = "b"
[[joints]]
name = "j1"
type = "revolute"
parent = "b"
child = "a"
"#;
        assert!(matches!(KinematicChain::from_toml_str(text), Err(Error::Cycle(_))));
        let all_cycle = r#"
links = ["a", "b"]
fingertip_links = ["b"]
[[joints]]
name = "j0"
type = "fixed"
parent = "a"
child = "b"
[[joints]]
name = "j1"
type = "fixed"
parent = "b"
child = "a"
"#;
        assert!(matches!(KinematicChain::from_toml_str(all_cycle), Err(Error::Cycle(_))));
    }

    #[test]
    fn bad_models_are_rejected() {
        let non_unit = r#"
links = ["base", "tip"]
fingertip_links = ["tip"]
[[joints]]
name = "j0"
type = "revolute"
parent = "base"
child = "tip"
axis = [0.0, 0.0, 2.0]
"#;
        assert!(matches!(KinematicChain::from_toml_str(non_unit), Err(Error::Invalid { .. })));
        let unknown_tip = r#"
links = ["base", "tip"]
fingertip_links = ["nope"]
[[joints]]
name = "j0"
type = "revolute"
parent = "base"
child = "tip"
"#;
        assert!(matches!(KinematicChain::from_toml_str(&unknown_tip), Err(Error::UnknownLink(_))));
        let unknown_key = "links = [\"a\"]\nfingertip_links = []\njoints = []\ncolour = 3\n";
        assert!(matches!(KinematicChain::from_toml_str(unknown_key), Err(Error::Parse { .. })));
        let two_roots = "links = [\"a\", \"b\"]\nfingertip_links = []\njoints = []\n";
        assert!(matches!(KinematicChain::from_toml_str(two_roots), Err(Error::NotATree(_))));
    }

    #[test]
    fn dof_mismatch_and_bad_index() {
        let chain = models::planar_two_link();
        assert!(matches!(
            chain.forward_kinematics(&HandConfiguration::zeros(3)),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            chain.fingertip_jacobian(&HandConfiguration::zeros(2), 1),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn clamp_examples() {
        let chain = models::hand20();
        let lo = chain.lower_limits();
        let hi = chain.upper_limits();
        let mid = HandConfiguration((&lo + &hi) * 0.5);
        assert_eq!(chain.clamp_to_limits(&mid).unwrap(), mid);
        let mut above = mid.clone();
        above.0[3] = hi[3] + 1.0;
        let clamped = chain.clamp_to_limits(&above).unwrap();
        assert_eq!(clamped[3], hi[3]);
        assert_eq!(chain.clamp_to_limits(&clamped).unwrap(), clamped);
    }

    #[test]
    fn fixed_chain_is_composed_origins() {
        let text = r#"
links = ["base", "a", "b"]
fingertip_links = ["b"]
[[joints]]
name = "f0"
type = "fixed"
parent = "base"
child = "a"
origin = [0.0, -1.0, 0.0, 0.1,  1.0, 0.0, 0.0, 0.2,  0.0, 0.0, 1.0, 0.3,  0.0, 0.0, 0.0, 1.0]
[[joints]]
name = "f1"
type = "fixed"
parent = "a"
child = "b"
origin = [1.0, 0.0, 0.0, 0.5,  0.0, 1.0, 0.0, 0.0,  0.0, 0.0, 1.0, 0.0,  0.0, 0.0, 0.0, 1.0]
"#;
        let chain = KinematicChain::from_toml_str(text).unwrap();
        assert_eq!(chain.dof(), 0);
        let fk = chain.forward_kinematics(&HandConfiguration::zeros(0)).unwrap();
        let expected = chain.joints()[0].origin.compose(&chain.joints()[1].origin);
        assert_eq!(fk.get("b").unwrap(), &expected);
        assert_eq!(fk.get("base").unwrap(), &RigidTransform::identity());
    }
}
