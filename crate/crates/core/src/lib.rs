//! 3D scene graph generation from segmented point clouds.

pub mod cli;
pub mod encoders;
pub mod evaluation;
pub mod geometry;
pub mod numeric;
pub mod reasoning;
pub mod scene;
pub mod training;

/// Combines two 64-bit values into a well-mixed seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(a ^ splitmix(b))
}

/// Concrete 64-bit instantiations of the generic core.
pub type Tensor = numeric::Tensor<f64>;
pub type Graph = numeric::Graph<f64>;
pub type ParamStore = numeric::ParamStore<f64>;
pub type AdamState = numeric::AdamState<f64>;
pub type Aabb = geometry::Aabb<f64>;
pub type PositionVector = geometry::PositionVector<f64>;
pub type Trained = training::Trained<f64>;
pub type HiddenStates = reasoning::HiddenStates<f64>;

/// Concrete 32-bit instantiations, for faster training.
pub mod f32 {
    pub type Tensor = crate::numeric::Tensor<f32>;
    pub type Graph = crate::numeric::Graph<f32>;
    pub type ParamStore = crate::numeric::ParamStore<f32>;
    pub type AdamState = crate::numeric::AdamState<f32>;
    pub type Aabb = crate::geometry::Aabb<f32>;
    pub type PositionVector = crate::geometry::PositionVector<f32>;
    pub type Trained = crate::training::Trained<f32>;
}
