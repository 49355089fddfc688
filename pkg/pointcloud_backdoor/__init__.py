"""Clean-label backdoor attacks on point cloud classifiers."""
