pub mod fixture;
pub mod mock_registry;
