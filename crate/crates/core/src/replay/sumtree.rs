//! Binary sum tree for proportional sampling in O(log n).

#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    len: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(len: usize) -> Self {
        let leaves = len.max(1).next_power_of_two();
        Self { leaves, len, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut tree = Self::new(values.len());
        tree.nodes[tree.leaves..tree.leaves + values.len()].copy_from_slice(values);
        for i in (1..tree.leaves).rev() {
            tree.nodes[i] = tree.nodes[2 * i] + tree.nodes[2 * i + 1];
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.len, "sum tree index {i} out of range {}", self.len);
        let mut node = self.leaves + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass` (0 <= mass < total).
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node = 2 * node;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        (node - self.leaves).min(self.len.saturating_sub(1))
    }
}
