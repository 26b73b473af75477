use std::collections::HashMap;

use crate::ciubm::QueryFeatures;
use crate::csft::FeatureSource;
use crate::encoders::ItemFeatures;
use crate::numerics::Tensor;
use crate::synthdata::World;

/// Backbone features of a generated world, item features cached up front.
pub struct WorldSource<'a> {
    pub world: &'a World,
    items: HashMap<u64, ItemFeatures>,
    /// Item features sorted by key.
    pub item_list: Vec<ItemFeatures>,
}

impl<'a> WorldSource<'a> {
    pub fn new(world: &'a World) -> Self {
        let mut item_list = world.catalog.all_item_features();
        item_list.sort_by_key(|f| f.key);
        let items = item_list.iter().map(|f| (f.key, f.clone())).collect();
        Self {
            world,
            items,
            item_list,
        }
    }

    pub fn item_keys(&self) -> Vec<u64> {
        self.item_list.iter().map(|f| f.key).collect()
    }

    pub fn items(&self) -> &HashMap<u64, ItemFeatures> {
        &self.items
    }
}

impl FeatureSource for WorldSource<'_> {
    fn item_features(&self, key: u64) -> Option<ItemFeatures> {
        self.items.get(&key).cloned()
    }

    fn query_feature(&self, key: u64) -> Option<Tensor> {
        self.world.query_feature(key).ok()
    }
}

impl QueryFeatures for WorldSource<'_> {
    fn query_feature(&self, key: u64) -> Option<Tensor> {
        self.world.query_feature(key).ok()
    }
}
