// placeholder, filled in once the core API is final
