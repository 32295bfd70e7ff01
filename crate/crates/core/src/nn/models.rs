//! LeNet-style networks whose convolutions are ACLs.
//!
//! Layout: `conv 1->8 5x5 pad 2, relu, pool 2 | conv 8->16 5x5, relu, pool 2 |
//! fc 400->120, relu | fc 120->84, relu | fc 84->10` on 1x28x28 inputs.
//! The plain LeNet is the same network with all-plain arrangements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::network::{NetError, Network, Node};
use crate::acl::AclLayer;
use crate::arrangement::{parse_pattern, Pattern};
use crate::conv::ConvHyper;
use crate::kernels::KernelSize;

pub const LENET_INPUT: [usize; 3] = [1, 28, 28];
pub const LENET_CONV1_OUT: usize = 8;
pub const LENET_CONV2_OUT: usize = 16;
pub const LENET_KERNEL: usize = 5;
pub const LENET_CLASSES: usize = 10;

/// Ratio pattern used for both ACLs of the analytic LeNet by default.
pub const EXP3_RATIOS: &str = "G0.1562Lg0.0781Lt0.0781Tf0.1875P0.5";

pub fn lenet(conv1: &Pattern, conv2: &Pattern, seed: u64) -> Result<Network, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = KernelSize::square(LENET_KERNEL);
    let acl_err = |index| move |source| NetError::Acl { index, source };
    let c1 =
        AclLayer::new(conv1.bind(1, LENET_CONV1_OUT)?, size, ConvHyper::padded(2), &mut rng).map_err(acl_err(0))?;
    let c2 = AclLayer::new(conv2.bind(LENET_CONV1_OUT, LENET_CONV2_OUT)?, size, ConvHyper::default(), &mut rng)
        .map_err(acl_err(3))?;
    let flat = LENET_CONV2_OUT * 5 * 5;
    let nodes = vec![
        Node::Acl(c1),
        Node::Relu,
        Node::MaxPool { kernel: 2, stride: 2 },
        Node::Acl(c2),
        Node::Relu,
        Node::MaxPool { kernel: 2, stride: 2 },
        Node::Flatten,
        Node::Linear(Linear::new(flat, 120, &mut rng)),
        Node::Relu,
        Node::Linear(Linear::new(120, 84, &mut rng)),
        Node::Relu,
        Node::Linear(Linear::new(84, LENET_CLASSES, &mut rng)),
    ];
    Network::new(LENET_INPUT, nodes)
}

/// Traditional LeNet: every kernel is a plain kernel.
pub fn plain_lenet(seed: u64) -> Result<Network, NetError> {
    let plain = parse_pattern("P1.0")?;
    lenet(&plain, &plain, seed)
}

/// LeNet with both convolutions replaced by ACLs bound from `pattern`.
pub fn anann_lenet(pattern: &Pattern, seed: u64) -> Result<Network, NetError> {
    lenet(pattern, pattern, seed)
}
