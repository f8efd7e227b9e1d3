/// A trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub momentum: Vec<f64>,
    /// Whether weight decay applies (filter and classifier weights only).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Vec<f64>, decay: bool) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n], momentum: vec![0.0; n], decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
