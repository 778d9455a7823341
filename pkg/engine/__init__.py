# Engine package marker for imports in tests and runtime.
