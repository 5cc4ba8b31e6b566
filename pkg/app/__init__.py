# PathSpace mapping backend, landmark baseline and experiment harness
