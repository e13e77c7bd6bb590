//! Demo kinematic chains.

use std::f64::consts::PI;

use crate::geometry::RigidTransform;
use crate::handmodel::{ChainDescription, Joint, JointKind, KinematicChain};

pub const ONE_DOF_LENGTH: f64 = 0.1;
pub const PLANAR_LENGTHS: (f64, f64) = (0.3, 0.2);

/// Palm-to-finger-root radius of the three-finger gripper.
pub const GRIPPER3_ROOT_RADIUS: f64 = 0.5;
pub const GRIPPER3_LENGTHS: (f64, f64) = (0.7, 0.6);

/// Shortest phalange of the 20-dof hand.
pub const HAND20_MIN_LINK: f64 = 0.02;

struct Builder {
    links: Vec<String>,
    joints: Vec<Joint>,
}

impl Builder {
    fn new(base: &str) -> Self {
        Self {
            links: vec![base.to_string()],
            joints: Vec::new(),
        }
    }

    fn joint(&mut self, name: &str, kind: JointKind, parent: &str, child: &str, origin: RigidTransform, axis: [f64; 3], limits: (f64, f64)) {
        self.links.push(child.to_string());
        self.joints.push(Joint {
            name: name.to_string(),
            kind,
            parent: parent.to_string(),
            child: child.to_string(),
            origin,
            axis,
            limit_lo: limits.0,
            limit_hi: limits.1,
        });
    }

    fn fixed(&mut self, name: &str, parent: &str, child: &str, origin: RigidTransform) {
        self.joint(name, JointKind::Fixed, parent, child, origin, [0.0, 0.0, 1.0], (f64::NEG_INFINITY, f64::INFINITY));
    }

    fn build(self, name: &str, tips: &[&str], palm: Option<&str>) -> KinematicChain {
        KinematicChain::new(ChainDescription {
            name: name.to_string(),
            links: self.links,
            joints: self.joints,
            fingertip_links: tips.iter().map(|s| s.to_string()).collect(),
            palm_link: palm.map(str::to_string),
        })
        .expect("demo chain is valid")
    }
}

const Z: [f64; 3] = [0.0, 0.0, 1.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const X: [f64; 3] = [1.0, 0.0, 0.0];

/// Single revolute joint about z with the tip at `(L, 0, 0)` when `q = 0`.
pub fn one_dof() -> KinematicChain {
    let mut b = Builder::new("base");
    b.joint("hinge", JointKind::Revolute, "base", "arm", RigidTransform::identity(), Z, (-PI, PI));
    b.fixed("tip_mount", "arm", "tip", RigidTransform::trans(ONE_DOF_LENGTH, 0.0, 0.0));
    b.build("one_dof", &["tip"], None)
}

/// Two revolute joints about z in the xy-plane.
pub fn planar_two_link() -> KinematicChain {
    let (l1, l2) = PLANAR_LENGTHS;
    let mut b = Builder::new("base");
    b.joint("shoulder", JointKind::Revolute, "base", "upper", RigidTransform::identity(), Z, (-PI, PI));
    b.joint("elbow", JointKind::Revolute, "upper", "lower", RigidTransform::trans(l1, 0.0, 0.0), Z, (-PI, PI));
    b.fixed("tip_mount", "lower", "tip", RigidTransform::trans(l2, 0.0, 0.0));
    b.build("planar_two_link", &["tip"], None)
}

/// One prismatic finger sliding along y, opening in `[0, 0.04]` m.
pub fn panda_gripper() -> KinematicChain {
    let mut b = Builder::new("hand");
    b.joint("finger_joint", JointKind::Prismatic, "hand", "finger", RigidTransform::trans(0.0, 0.0, 0.0584), Y, (0.0, 0.04));
    b.fixed("tip_mount", "finger", "tip", RigidTransform::trans(0.0, 0.0, 0.045));
    b.build("panda_gripper", &["tip"], Some("hand"))
}

/// Three fingers spaced 120° around the palm, hanging along −z.
///
/// Each finger has an abduction joint about its radial axis and two flexion
/// joints about the tangential axis.
pub fn gripper3() -> KinematicChain {
    let (l1, l2) = GRIPPER3_LENGTHS;
    let mut b = Builder::new("palm");
    let mut tips = Vec::new();
    for f in 0..3 {
        let phi = f as f64 * 2.0 * PI / 3.0;
        let n = |s: &str| format!("f{f}_{s}");
        let root = RigidTransform::rot_z(phi).compose(&RigidTransform::trans(GRIPPER3_ROOT_RADIUS, 0.0, 0.0));
        b.fixed(&n("root"), "palm", &n("base"), root);
        b.joint(&n("abd"), JointKind::Revolute, &n("base"), &n("knuckle"), RigidTransform::identity(), X, (-0.5, 0.5));
        b.joint(&n("j0"), JointKind::Revolute, &n("knuckle"), &n("proximal"), RigidTransform::identity(), Y, (-1.6, 1.6));
        b.joint(&n("j1"), JointKind::Revolute, &n("proximal"), &n("distal"), RigidTransform::trans(0.0, 0.0, -l1), Y, (-0.2, 2.0));
        b.fixed(&n("tip_mount"), &n("distal"), &n("tip"), RigidTransform::trans(0.0, 0.0, -l2));
        tips.push(n("tip"));
    }
    let tips: Vec<&str> = tips.iter().map(String::as_str).collect();
    b.build("gripper3", &tips, Some("palm"))
}

/// Finger names, palm-frame root offsets (m), root yaw and phalange lengths
/// (proximal, middle, distal) of the 20-dof hand.
pub const HAND20_FINGERS: [(&str, [f64; 2], f64, [f64; 3]); 5] = [
    ("thumb", [0.02, -0.035], -0.9, [0.038, 0.03, 0.02]),
    ("index", [0.09, -0.025], 0.08, [0.045, 0.026, 0.021]),
    ("middle", [0.095, 0.0], 0.0, [0.05, 0.03, 0.022]),
    ("ring", [0.09, 0.022], -0.06, [0.046, 0.028, 0.021]),
    ("little", [0.08, 0.042], -0.14, [0.036, 0.02, 0.02]),
];

/// Five fingers with abduction, MCP, PIP and DIP joints (20 dof).
pub fn hand20() -> KinematicChain {
    let mut b = Builder::new("palm");
    let mut tips = Vec::new();
    for (name, [x, y], yaw, [lp, lm, ld]) in HAND20_FINGERS {
        let n = |s: &str| format!("{name}_{s}");
        b.fixed(&n("root"), "palm", &n("base"), RigidTransform::trans(x, y, 0.0).compose(&RigidTransform::rot_z(yaw)));
        b.joint(&n("abd"), JointKind::Revolute, &n("base"), &n("knuckle"), RigidTransform::identity(), Z, (-0.35, 0.35));
        b.joint(&n("mcp"), JointKind::Revolute, &n("knuckle"), &n("proximal"), RigidTransform::identity(), Y, (-0.2, 1.5));
        b.joint(&n("pip"), JointKind::Revolute, &n("proximal"), &n("middle"), RigidTransform::trans(lp, 0.0, 0.0), Y, (0.0, 1.7));
        b.joint(&n("dip"), JointKind::Revolute, &n("middle"), &n("distal"), RigidTransform::trans(lm, 0.0, 0.0), Y, (0.0, 1.4));
        b.fixed(&n("tip_mount"), &n("distal"), &n("tip"), RigidTransform::trans(ld, 0.0, 0.0));
        tips.push(n("tip"));
    }
    let tips: Vec<&str> = tips.iter().map(String::as_str).collect();
    b.build("hand20", &tips, Some("palm"))
}

/// Middle, distal and tip link of every finger of [`hand20`].
pub fn hand20_keypoint_links() -> Vec<String> {
    HAND20_FINGERS
        .iter()
        .flat_map(|(name, ..)| ["middle", "distal", "tip"].map(|s| format!("{name}_{s}")))
        .collect()
}

pub fn all() -> Vec<KinematicChain> {
    vec![one_dof(), planar_two_link(), panda_gripper(), gripper3(), hand20()]
}
