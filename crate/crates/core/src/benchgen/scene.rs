use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

macro_rules! attribute {
    ($name:ident { $($var:ident => $word:literal / $plural:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$var => $word),+
                }
            }

            #[allow(dead_code)]
            pub fn plural(self) -> &'static str {
                match self {
                    $($name::$var => $plural),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

attribute!(Shape {
    Circle => "circle" / "circles",
    Square => "square" / "squares",
    Triangle => "triangle" / "triangles",
    Star => "star" / "stars",
});

attribute!(Color {
    Red => "red" / "red",
    Green => "green" / "green",
    Blue => "blue" / "blue",
    Yellow => "yellow" / "yellow",
});

attribute!(Size {
    Small => "small" / "small",
    Large => "large" / "large",
});

/// Width of the attribute one-hot part of a region feature.
pub const ONE_HOT_WIDTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Slot in the original scene; keys the feature jitter so edited scenes
    /// keep the jitter of the objects that remain.
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    /// Scene this one was edited from (itself for generated scenes).
    pub root_id: u64,
    pub objects: Vec<Object>,
    /// One region feature row per object.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Extra feature dims holding pure noise.
    pub noise_dims: usize,
    pub jitter_std: f64,
    /// Probability that an object takes its shape's preferred color.
    pub color_bias: f64,
    /// Probability that an object takes its color's preferred size.
    pub size_bias: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 6,
            noise_dims: 2,
            jitter_std: 0.1,
            color_bias: 0.55,
            size_bias: 0.7,
        }
    }
}

impl SceneParams {
    pub fn region_dim(&self) -> usize {
        ONE_HOT_WIDTH + self.noise_dims
    }
}

fn biased<T: Copy, R: Rng + ?Sized>(all: &[T], preferred: usize, bias: f64, rng: &mut R) -> T {
    if rng.random::<f64>() < bias {
        all[preferred]
    } else {
        all[rng.random_range(0..all.len())]
    }
}

/// Per-object features: shape, color and size one-hots followed by noise
/// dims, plus Gaussian jitter keyed by `(seed, root_id, slot)`.
pub fn object_features(seed: u64, root_id: u64, o: &Object, params: &SceneParams) -> Vec<f64> {
    let mut f = vec![0.0; params.region_dim()];
    f[o.shape.index()] = 1.0;
    f[4 + o.color.index()] = 1.0;
    f[8 + o.size.index()] = 1.0;
    let mut rng = stream(seed, Purpose::Jitter, &[root_id, o.slot as u64]);
    for v in &mut f {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += params.jitter_std * z;
    }
    f
}

/// Draws a scene. `seed` is the suite seed (for jitter); `rng` drives the
/// attribute draws.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, params: &SceneParams, scene_id: u64, seed: u64) -> Scene {
    let n = rng.random_range(params.min_objects.max(1)..=params.max_objects.max(1));
    let objects: Vec<Object> = (0..n)
        .map(|slot| {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = biased(Color::ALL, shape.index(), params.color_bias, rng);
            let size = biased(Size::ALL, color.index() % 2, params.size_bias, rng);
            Object {
                shape,
                color,
                size,
                slot: slot as u32,
            }
        })
        .collect();
    let features = objects
        .iter()
        .map(|o| object_features(seed, scene_id, o, params))
        .collect();
    Scene {
        scene_id,
        root_id: scene_id,
        objects,
        features,
    }
}

impl Scene {
    /// Copy of this scene with object `idx` removed.
    pub fn without(&self, idx: usize, new_id: u64) -> Scene {
        let mut objects = self.objects.clone();
        let mut features = self.features.clone();
        objects.remove(idx);
        features.remove(idx);
        Scene {
            scene_id: new_id,
            root_id: self.root_id,
            objects,
            features,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene_and_bounds() {
        let p = SceneParams::default();
        for i in 0..50 {
            let a = gen_scene(&mut stream(1, Purpose::Scene, &[i]), &p, i, 1);
            let b = gen_scene(&mut stream(1, Purpose::Scene, &[i]), &p, i, 1);
            assert_eq!(a, b);
            assert!((1..=p.max_objects).contains(&a.objects.len()));
        }
    }

    #[test]
    fn jitter_depends_on_scene_id() {
        let p = SceneParams::default();
        let o = Object {
            shape: Shape::Star,
            color: Color::Red,
            size: Size::Small,
            slot: 0,
        };
        assert_ne!(object_features(1, 3, &o, &p), object_features(1, 4, &o, &p));
    }

    #[test]
    fn removal_keeps_remaining_features() {
        let p = SceneParams::default();
        let s = gen_scene(&mut stream(2, Purpose::Scene, &[0]), &p, 0, 2);
        let t = s.without(0, 99);
        assert_eq!(t.objects.len(), s.objects.len() - 1);
        assert_eq!(t.features[0], s.features[1]);
        assert_eq!(
            t.features[0],
            object_features(2, t.root_id, &t.objects[0], &p)
        );
    }
}
