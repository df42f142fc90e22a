# Feature modules: data, tokenizers, policies, distillation, scaling, evaluation
