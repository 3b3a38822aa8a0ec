use rand::Rng;

use crate::tensor::Tensor;

/// History of generated images shown to a discriminator.
///
/// While filling, every new image is stored and returned. Once full, each
/// push returns the new image with probability ½; otherwise a uniformly
/// chosen stored image is returned and replaced by the new one.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor<f32>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::with_capacity(capacity) }
    }

    pub fn with_images(capacity: usize, images: Vec<Tensor<f32>>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn push_sample<R: Rng>(&mut self, image: Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.gen::<f64>() < 0.5 {
            image
        } else {
            let i = rng.gen_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image)
        }
    }

    /// Applies [`push_sample`](Self::push_sample) to each sample of a batch.
    pub fn push_batch<R: Rng>(&mut self, batch: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        let out: Vec<Tensor<f32>> =
            (0..batch.shape().n).map(|i| self.push_sample(batch.select(i), rng)).collect();
        let refs: Vec<&Tensor<f32>> = out.iter().collect();
        Tensor::concat(&refs).expect("samples share a shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(v: f32) -> Tensor<f32> {
        Tensor::full(Shape::new(1, 1, 1, 1), v)
    }

    #[test]
    fn zero_capacity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = ImagePool::new(0);
        for i in 0..20 {
            assert_eq!(pool.push_sample(img(i as f32), &mut rng), img(i as f32));
        }
        assert!(pool.images().is_empty());
    }

    #[test]
    fn fill_phase_returns_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = ImagePool::new(50);
        for i in 0..50 {
            assert_eq!(pool.push_sample(img(i as f32), &mut rng), img(i as f32));
        }
        assert_eq!(pool.images().len(), 50);
    }

    #[test]
    fn half_of_returns_are_new_after_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pool = ImagePool::new(50);
        for i in 0..50 {
            pool.push_sample(img(-(i as f32) - 1.0), &mut rng);
        }
        let n = 10_000;
        let fresh = (0..n).filter(|&i| pool.push_sample(img(i as f32), &mut rng) == img(i as f32)).count();
        let frac = fresh as f64 / n as f64;
        assert!((0.45..=0.55).contains(&frac), "fraction {frac}");
        assert_eq!(pool.images().len(), 50);
    }
}
